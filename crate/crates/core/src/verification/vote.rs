//! Majority voting over repeated vision answers.

use serde::{Deserialize, Serialize};

use crate::gateway::Selection;

pub const VOTE_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// A letter chosen at least twice wins.
    #[default]
    Majority,
    /// All three runs must agree.
    Unanimous,
}

impl VoteRule {
    fn required(self) -> usize {
        match self {
            VoteRule::Majority => 2,
            VoteRule::Unanimous => VOTE_COUNT,
        }
    }
}

/// Returns the letter picked at least twice, otherwise [`Selection::Tie`].
///
/// Anything that is not a letter (abstention, unparseable) is a vote for
/// no letter.
pub fn majority_vote(selections: &[Selection; VOTE_COUNT]) -> Selection {
    vote_with_rule(selections, VoteRule::Majority)
}

pub fn vote_with_rule(selections: &[Selection; VOTE_COUNT], rule: VoteRule) -> Selection {
    for s in selections {
        if let Selection::Letter(c) = s {
            let n = selections.iter().filter(|t| **t == Selection::Letter(*c)).count();
            if n >= rule.required() {
                return Selection::Letter(*c);
            }
        }
    }
    Selection::Tie
}

/// Outcome of the repeated vision runs for one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotingRecord {
    pub selections: Vec<Selection>,
    /// A letter or [`Selection::Tie`].
    pub majority: Selection,
    /// Full response of the first run that chose the majority letter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreeing_run_index: Option<usize>,
}

impl VotingRecord {
    /// Tallies `runs` (parsed selection, raw response).
    pub fn from_runs(runs: &[(Selection, String); VOTE_COUNT], rule: VoteRule) -> Self {
        let selections = [runs[0].0, runs[1].0, runs[2].0];
        let majority = vote_with_rule(&selections, rule);
        let agreeing = match majority {
            Selection::Letter(_) => selections.iter().position(|s| *s == majority),
            _ => None,
        };
        Self {
            selections: selections.to_vec(),
            majority,
            reasoning: agreeing.map(|i| runs[i].1.clone()),
            agreeing_run_index: agreeing,
        }
    }

    /// Checks the coupling between the tally and the stored reasoning.
    pub fn is_consistent(&self) -> bool {
        let Ok(selections) = <[Selection; VOTE_COUNT]>::try_from(self.selections.as_slice()) else {
            return false;
        };
        let letter_majority = matches!(self.majority, Selection::Letter(_));
        let majority_ok = self.majority == majority_vote(&selections)
            || self.majority == vote_with_rule(&selections, VoteRule::Unanimous);
        let index_ok = match self.agreeing_run_index {
            Some(i) => letter_majority && selections.iter().position(|s| *s == self.majority) == Some(i),
            None => !letter_majority,
        };
        majority_ok && index_ok && self.reasoning.is_some() == letter_majority
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: Selection = Selection::Letter('A');
    const B: Selection = Selection::Letter('B');
    const C: Selection = Selection::Letter('C');
    const N: Selection = Selection::NoneSignal;

    #[test]
    fn examples() {
        assert_eq!(majority_vote(&[A, A, B]), A);
        assert_eq!(majority_vote(&[A, B, C]), Selection::Tie);
        assert_eq!(majority_vote(&[N, C, C]), C);
        assert_eq!(majority_vote(&[N, N, A]), Selection::Tie);
        assert_eq!(vote_with_rule(&[A, A, B], VoteRule::Unanimous), Selection::Tie);
        assert_eq!(vote_with_rule(&[B, B, B], VoteRule::Unanimous), B);
    }

    #[test]
    fn reasoning_from_first_agreeing_run() {
        let runs = [
            (B, "r0".to_string()),
            (C, "r1".to_string()),
            (C, "r2".to_string()),
        ];
        let rec = VotingRecord::from_runs(&runs, VoteRule::Majority);
        assert_eq!(rec.majority, C);
        assert_eq!(rec.agreeing_run_index, Some(1));
        assert_eq!(rec.reasoning.as_deref(), Some("r1"));
        assert!(rec.is_consistent());

        let tie = VotingRecord::from_runs(
            &[(A, "x".into()), (B, "y".into()), (N, "z".into())],
            VoteRule::Majority,
        );
        assert_eq!(tie.majority, Selection::Tie);
        assert!(tie.reasoning.is_none() && tie.agreeing_run_index.is_none());
        assert!(tie.is_consistent());
    }

    fn selection() -> impl Strategy<Value = Selection> {
        prop_oneof![
            (0u8..4).prop_map(|i| Selection::Letter((b'A' + i) as char)),
            Just(Selection::NoneSignal),
            Just(Selection::Ambiguous),
        ]
    }

    proptest! {
        #[test]
        fn vote_is_order_independent(a in selection(), b in selection(), c in selection()) {
            let m = majority_vote(&[a, b, c]);
            prop_assert_eq!(m, majority_vote(&[c, a, b]));
            prop_assert_eq!(m, majority_vote(&[b, c, a]));
            prop_assert_eq!(m, majority_vote(&[a, c, b]));
        }

        #[test]
        fn records_are_consistent(a in selection(), b in selection(), c in selection()) {
            let runs = [(a, "0".to_string()), (b, "1".to_string()), (c, "2".to_string())];
            let rec = VotingRecord::from_runs(&runs, VoteRule::Majority);
            prop_assert!(rec.is_consistent());
            if let Some(i) = rec.agreeing_run_index {
                prop_assert_eq!(rec.selections[i], rec.majority);
                prop_assert_eq!(rec.reasoning.as_deref(), Some(runs[i].1.as_str()));
            }
        }
    }
}

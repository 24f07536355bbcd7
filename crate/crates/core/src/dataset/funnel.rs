//! Per-stage counts and retention relative to extracted claims.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelStage {
    Papers,
    Claims,
    QaGenerated,
    AfterTextFiltering,
    AfterVisionFiltering,
}

impl FunnelStage {
    pub const ALL: [FunnelStage; 5] = [
        FunnelStage::Papers,
        FunnelStage::Claims,
        FunnelStage::QaGenerated,
        FunnelStage::AfterTextFiltering,
        FunnelStage::AfterVisionFiltering,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FunnelStage::Papers => "Papers",
            FunnelStage::Claims => "Atomic claims extracted",
            FunnelStage::QaGenerated => "QA pairs generated",
            FunnelStage::AfterTextFiltering => "After text-based filtering",
            FunnelStage::AfterVisionFiltering => "After vision-based filtering",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelCounts {
    pub papers: u64,
    pub claims: u64,
    pub qa_generated: u64,
    pub after_text_filtering: u64,
    pub after_vision_filtering: u64,
}

impl FunnelCounts {
    pub fn get(&self, stage: FunnelStage) -> u64 {
        match stage {
            FunnelStage::Papers => self.papers,
            FunnelStage::Claims => self.claims,
            FunnelStage::QaGenerated => self.qa_generated,
            FunnelStage::AfterTextFiltering => self.after_text_filtering,
            FunnelStage::AfterVisionFiltering => self.after_vision_filtering,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FunnelError {
    #[error("claim count is zero")]
    NoClaims,
    #[error("{stage:?} count {count} exceeds the preceding stage ({previous})")]
    InvalidFunnel { stage: FunnelStage, count: u64, previous: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub counts: FunnelCounts,
    /// Retention in tenths of a percent, for every stage from claims on.
    pub retention_tenths: BTreeMap<FunnelStage, u64>,
}

impl FunnelStats {
    pub fn retention_percent(&self, stage: FunnelStage) -> Option<f64> {
        self.retention_tenths.get(&stage).map(|t| *t as f64 / 10.0)
    }

    /// Retention as printed, e.g. "38.4%".
    pub fn retention_display(&self, stage: FunnelStage) -> Option<String> {
        self.retention_tenths.get(&stage).map(|t| format!("{}.{}%", t / 10, t % 10))
    }
}

/// How a ratio is brought to one decimal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Half-up to hundredths, then half-up to tenths. Matches the
    /// published reference table (38.3499..% prints as 38.4%).
    #[default]
    ViaHundredths,
    /// Half-up straight to tenths.
    Direct,
}

/// `100 * count / base` rounded half-up to `10^-places`, in those units.
fn round_half_up(count: u64, base: u64, places: u32) -> u64 {
    let (count, base) = (count as u128, base as u128);
    let scale = 100 * 10u128.pow(places);
    ((2 * scale * count + base) / (2 * base)) as u64
}

/// Retention of `count` relative to `base`, in tenths of a percent.
pub fn retention_tenths(count: u64, base: u64, rounding: Rounding) -> u64 {
    match rounding {
        Rounding::Direct => round_half_up(count, base, 1),
        Rounding::ViaHundredths => (round_half_up(count, base, 2) + 5) / 10,
    }
}

pub fn compute_funnel(counts: FunnelCounts) -> Result<FunnelStats, FunnelError> {
    compute_funnel_with(counts, Rounding::default())
}

pub fn compute_funnel_with(counts: FunnelCounts, rounding: Rounding) -> Result<FunnelStats, FunnelError> {
    if counts.claims == 0 {
        return Err(FunnelError::NoClaims);
    }
    let tracked = &FunnelStage::ALL[1..];
    for pair in tracked.windows(2) {
        let (previous, count) = (counts.get(pair[0]), counts.get(pair[1]));
        if count > previous {
            return Err(FunnelError::InvalidFunnel {
                stage: pair[1],
                count,
                previous,
            });
        }
    }
    let retention_tenths = tracked
        .iter()
        .map(|s| (*s, retention_tenths(counts.get(*s), counts.claims, rounding)))
        .collect();
    Ok(FunnelStats {
        counts,
        retention_tenths,
    })
}

fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Step / Count / Retention table. The claims row is the reference and
/// prints as "100%".
pub fn render_funnel_table(stats: &FunnelStats) -> String {
    let rows: Vec<(String, String, String)> = FunnelStage::ALL
        .iter()
        .map(|s| {
            let retention = match s {
                FunnelStage::Papers => "---".to_string(),
                FunnelStage::Claims => "100%".to_string(),
                other => stats.retention_display(*other).unwrap_or_default(),
            };
            (s.label().to_string(), thousands(stats.counts.get(*s)), retention)
        })
        .collect();
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
    let w1 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(5);
    let w2 = rows.iter().map(|r| r.2.len()).max().unwrap_or(0).max(9);
    let mut out = String::new();
    let mut line = |a: &str, b: &str, c: &str| {
        out.push_str(&format!("{a:<w0$}  {b:>w1$}  {c:>w2$}\n"));
    };
    line("Step", "Count", "Retention");
    for (a, b, c) in &rows {
        line(a, b, c);
    }
    out
}

impl fmt::Display for FunnelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_funnel_table(self))
    }
}

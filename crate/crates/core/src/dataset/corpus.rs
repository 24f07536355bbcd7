//! Corpus input: figure/caption records plus a LaTeX cache directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};
use crate::latex::{FigureCaptionPair, RawPaper};

/// One figure of one paper, as listed in the corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub arxiv_id: String,
    pub primary_category: String,
    pub figure_index: usize,
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Records(#[from] JsonlError),
    #[error("LaTeX source for {arxiv_id} not found at {path}")]
    MissingLatex { arxiv_id: String, path: PathBuf },
    #[error("{arxiv_id}: conflicting primary categories {first:?} and {second:?}")]
    ConflictingCategory {
        arxiv_id: String,
        first: String,
        second: String,
    },
    #[error("{arxiv_id}: figure index {figure_index} listed twice")]
    DuplicateFigure { arxiv_id: String, figure_index: usize },
}

/// Cache file name for a paper; old-style ids contain a slash.
pub fn latex_file_name(arxiv_id: &str) -> String {
    format!("{}.tex", arxiv_id.replace('/', "_"))
}

/// Groups corpus records into papers, in order of first appearance, and
/// attaches each paper's LaTeX source.
pub fn load_corpus(records_path: &Path, latex_dir: &Path) -> Result<Vec<RawPaper>, CorpusError> {
    let records: Vec<CorpusRecord> = jsonl::read_records(records_path)?;
    let mut papers: Vec<RawPaper> = Vec::new();
    for r in records {
        let pair = FigureCaptionPair {
            figure_index: r.figure_index,
            image: r.image,
            caption: r.caption,
        };
        match papers.iter_mut().find(|p| p.arxiv_id == r.arxiv_id) {
            Some(p) => {
                if p.primary_category != r.primary_category {
                    return Err(CorpusError::ConflictingCategory {
                        arxiv_id: r.arxiv_id,
                        first: p.primary_category.clone(),
                        second: r.primary_category,
                    });
                }
                if p.figure_caption_pairs.iter().any(|f| f.figure_index == pair.figure_index) {
                    return Err(CorpusError::DuplicateFigure {
                        arxiv_id: r.arxiv_id,
                        figure_index: pair.figure_index,
                    });
                }
                p.figure_caption_pairs.push(pair);
            }
            None => papers.push(RawPaper {
                arxiv_id: r.arxiv_id,
                primary_category: r.primary_category,
                latex_source: String::new(),
                figure_caption_pairs: vec![pair],
            }),
        }
    }
    for p in &mut papers {
        let path = latex_dir.join(latex_file_name(&p.arxiv_id));
        p.latex_source = std::fs::read_to_string(&path).map_err(|_| CorpusError::MissingLatex {
            arxiv_id: p.arxiv_id.clone(),
            path: path.clone(),
        })?;
    }
    Ok(papers)
}

//! Label sidecar files.
//!
//! Either one integer per line (dense; `-1` = unlabeled) or `index label` pairs
//! (sparse). An optional `# classes: a,b,c` line names the classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::{Scene, UNLABELED};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelContent {
    Dense(Vec<i32>),
    Sparse(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub class_names: Option<Vec<String>>,
    pub content: LabelContent,
}

impl LabelFile {
    /// Declared class names, or `class0..classK` covering the largest label seen.
    pub fn class_names_or_inferred(&self) -> Vec<String> {
        if let Some(names) = &self.class_names {
            return names.clone();
        }
        let max = match &self.content {
            LabelContent::Dense(d) => d.iter().copied().max().unwrap_or(UNLABELED),
            LabelContent::Sparse(s) => s.iter().map(|p| p.1 as i32).max().unwrap_or(UNLABELED),
        };
        (0..=max).map(|i| format!("class{i}")).collect()
    }
}

pub fn parse_labels(text: &str) -> Result<LabelFile> {
    let mut class_names = None;
    let mut dense = Vec::new();
    let mut sparse = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("classes:") {
                let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(String::is_empty) {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "empty class name".into(),
                    });
                }
                class_names = Some(names);
            }
            continue;
        }
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [l] => {
                let l: i32 = l.parse().map_err(|_| bad(format!("bad label '{l}'")))?;
                if l < UNLABELED {
                    return Err(bad(format!("negative label {l}")));
                }
                dense.push(l);
            }
            [idx, l] => {
                let idx: usize = idx.parse().map_err(|_| bad(format!("bad index '{idx}'")))?;
                let l: usize = l.parse().map_err(|_| bad(format!("bad label '{l}'")))?;
                sparse.push((idx, l));
            }
            _ => return Err(bad(format!("expected 1 or 2 fields, found {}", fields.len()))),
        }
        if !dense.is_empty() && !sparse.is_empty() {
            return Err(bad("mixes dense and sparse label lines".into()));
        }
    }

    if let Some(names) = &class_names {
        let c = names.len();
        let too_big = dense
            .iter()
            .map(|&l| l as i64)
            .chain(sparse.iter().map(|p| p.1 as i64))
            .find(|&l| l >= c as i64);
        if let Some(l) = too_big {
            return Err(Error::Range(format!("label {l} outside [0, {c})")));
        }
    }
    let content = if sparse.is_empty() {
        LabelContent::Dense(dense)
    } else {
        LabelContent::Sparse(sparse)
    };
    Ok(LabelFile {
        class_names,
        content,
    })
}

/// Dense labels when present, otherwise the sparse annotation set.
pub fn write_labels(scene: &Scene) -> String {
    let mut out = format!("# classes: {}\n", scene.class_names().join(","));
    match scene.dense_labels() {
        Some(d) => {
            for l in d {
                let _ = writeln!(out, "{l}");
            }
        }
        None => {
            for (i, l) in scene.sparse_labels() {
                let _ = writeln!(out, "{i} {l}");
            }
        }
    }
    out
}

use std::ops::Range;

use super::{PolicyConfig, PolicyKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    Gain,
    Embedding,
}

/// A named `rows x cols` row-major block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub role: Role,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let (k, d, f) = (cfg.k, cfg.d_model, cfg.ff_dim);
        use Role::*;
        let spec: Vec<(&'static str, Role, usize, usize)> = match cfg.kind {
            PolicyKind::Transformer => vec![
                ("tok_w", Weight, k, d),
                ("tok_b", Bias, 1, d),
                ("round_emb", Embedding, cfg.max_rounds, d),
                ("pos_emb", Embedding, k, d),
                ("ln1_g", Gain, 1, d),
                ("ln1_b", Bias, 1, d),
                ("wq", Weight, d, d),
                ("bq", Bias, 1, d),
                ("wk", Weight, d, d),
                ("bk", Bias, 1, d),
                ("wv", Weight, d, d),
                ("bv", Bias, 1, d),
                ("wo", Weight, d, d),
                ("bo", Bias, 1, d),
                ("ln2_g", Gain, 1, d),
                ("ln2_b", Bias, 1, d),
                ("ff1_w", Weight, d, f),
                ("ff1_b", Bias, 1, f),
                ("ff2_w", Weight, f, d),
                ("ff2_b", Bias, 1, d),
                ("lnf_g", Gain, 1, d),
                ("lnf_b", Bias, 1, d),
                ("out_w", Weight, d, k),
                ("out_b", Bias, 1, k),
            ],
            PolicyKind::Mlp => vec![
                ("mlp1_w", Weight, k, d),
                ("mlp1_b", Bias, 1, d),
                ("out_w", Weight, d, k),
                ("out_b", Bias, 1, k),
            ],
        };
        let mut offset = 0;
        let segments = spec
            .into_iter()
            .map(|(name, role, rows, cols)| {
                let seg = Segment {
                    name,
                    role,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                seg
            })
            .collect();
        Self {
            segments,
            len: offset,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Panics on unknown names; the set is fixed per [`PolicyKind`].
    pub fn get(&self, name: &str) -> &Segment {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter segment named {name}"))
    }
}

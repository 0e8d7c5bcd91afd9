use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Embedding,
    Matrix,
    Norm,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Ordered table of named parameter tensors in a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Canonical layout for a model: embedding, then per layer
    /// `attn_norm, wq, wk, wv, wo, ffn_norm, w1, w3, w2`, then the final
    /// norm and the output head. Matrices are stored `out x in`.
    pub fn for_config(cfg: &ModelConfig) -> Layout {
        let (d, f, v) = (cfg.d_model, cfg.ffw_dim, cfg.vocab_size);
        let mut b = LayoutBuilder::default();
        b.push("tok_embed", SegmentKind::Embedding, vec![v, d]);
        for l in 0..cfg.n_layers {
            b.push(&format!("layers.{l}.attn_norm"), SegmentKind::Norm, vec![d]);
            for m in ["wq", "wk", "wv", "wo"] {
                b.push(&format!("layers.{l}.{m}"), SegmentKind::Matrix, vec![d, d]);
            }
            b.push(&format!("layers.{l}.ffn_norm"), SegmentKind::Norm, vec![d]);
            b.push(&format!("layers.{l}.w1"), SegmentKind::Matrix, vec![f, d]);
            b.push(&format!("layers.{l}.w3"), SegmentKind::Matrix, vec![f, d]);
            b.push(&format!("layers.{l}.w2"), SegmentKind::Matrix, vec![d, f]);
        }
        b.push("final_norm", SegmentKind::Norm, vec![d]);
        b.push("lm_head", SegmentKind::Head, vec![v, d]);
        b.finish()
    }

    /// A layout with a single tensor, for standalone parameter sets such as
    /// probes.
    pub fn single(name: &str, kind: SegmentKind, shape: Vec<usize>) -> Layout {
        let mut b = LayoutBuilder::default();
        b.push(name, kind, shape);
        b.finish()
    }

    pub fn from_segments(segments: Vec<Segment>) -> Result<Layout> {
        let mut offset = 0;
        for s in &segments {
            if s.offset != offset || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::Format(format!("inconsistent layout entry `{}`", s.name)));
            }
            offset += s.len;
        }
        Ok(Layout {
            segments,
            total: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Default)]
struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, kind: SegmentKind, shape: Vec<usize>) {
        let len = shape.iter().product();
        self.segments.push(Segment {
            name: name.to_string(),
            kind,
            shape,
            offset: self.offset,
            len,
        });
        self.offset += len;
    }

    fn finish(self) -> Layout {
        Layout {
            segments: self.segments,
            total: self.offset,
        }
    }
}

/// All model parameters in one flat, ordered vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T = f32> {
    layout: Arc<Layout>,
    values: Vec<T>,
}

impl<T: Real> WeightVector<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![T::zero(); layout.len()];
        WeightVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(WeightVector { layout, values })
    }

    /// Seeded initialisation: N(0, 0.02) for embeddings, matrices and the
    /// head, residual output projections scaled by `1/sqrt(2 n_layers)`,
    /// unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = Arc::new(Layout::for_config(cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid = std / (2.0 * cfg.n_layers as f64).sqrt();
        let mut values = Vec::with_capacity(layout.len());
        for seg in layout.segments() {
            let sd = if seg.name.ends_with(".wo") || seg.name.ends_with(".w2") {
                resid
            } else {
                std
            };
            match seg.kind {
                SegmentKind::Norm => values.extend(std::iter::repeat_n(T::one(), seg.len)),
                _ => {
                    let normal = Normal::new(0.0, sd).expect("positive std");
                    values.extend((0..seg.len).map(|_| T::of(normal.sample(&mut rng))));
                }
            }
        }
        WeightVector { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[T]> {
        self.layout
            .segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let s = self.layout.segment(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// `(segment, values)` pairs in layout order.
    pub fn segments(&self) -> impl Iterator<Item = (&Segment, &[T])> {
        self.layout
            .segments()
            .iter()
            .map(move |s| (s, &self.values[s.offset..s.offset + s.len]))
    }

    /// Split into named tensors.
    pub fn unflatten(&self) -> Vec<(String, Vec<T>)> {
        self.segments().map(|(s, v)| (s.name.clone(), v.to_vec())).collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten); tensors must be given in
    /// layout order with matching sizes.
    pub fn flatten(layout: Arc<Layout>, tensors: &[(String, Vec<T>)]) -> Result<Self> {
        if tensors.len() != layout.segments().len() {
            return Err(Error::Layout("tensor count differs from layout".into()));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (seg, (name, t)) in layout.segments().iter().zip(tensors) {
            if &seg.name != name || seg.len != t.len() {
                return Err(Error::Layout(format!("tensor `{name}` does not match `{}`", seg.name)));
            }
            values.extend_from_slice(t);
        }
        Ok(WeightVector { layout, values })
    }

    pub fn same_layout(&self, other: &WeightVector<T>) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_layout(&self, other: &WeightVector<T>) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Layout(format!(
                "layouts differ ({} vs {} values)",
                self.len(),
                other.len()
            )))
        }
    }

    pub fn cast<U: Real>(&self) -> WeightVector<U> {
        WeightVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Squared L2 norm, accumulated in f64.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &WeightVector<T>) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.f64() * b.f64())
            .sum())
    }

    /// `self - other`.
    pub fn sub(&self, other: &WeightVector<T>) -> Result<WeightVector<T>> {
        self.check_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| a - b).collect();
        Ok(WeightVector {
            layout: self.layout.clone(),
            values,
        })
    }

    /// `self + coef * dir`, with the sum formed in f64 before rounding.
    pub fn add_scaled(&self, coef: f64, dir: &WeightVector<T>) -> Result<WeightVector<T>> {
        self.check_layout(dir)?;
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(&a, &d)| T::of(a.f64() + coef * d.f64()))
            .collect();
        Ok(WeightVector {
            layout: self.layout.clone(),
            values,
        })
    }

    pub fn scale(&self, c: f64) -> WeightVector<T> {
        WeightVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| T::of(v.f64() * c)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// SHA-256 of the little-endian f64 widening of every value plus the
    /// layout, as lowercase hex.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&*self.layout).expect("layout serialises"));
        for v in &self.values {
            h.update(v.f64().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

//! Training objective: batch-hard part triplet loss over mean per-part
//! Euclidean distances, label-smoothed identity cross-entropy, and the
//! weighted total with the part attention loss.

use candle_core::{DType, Tensor};

use crate::error::{config_err, data_err, Result};
use crate::focuser::PartEmbeddings;
use crate::nn::{log_softmax_last, safe_norm_last, Linear, VarStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub part_count: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            part_count: 6,
        }
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean Euclidean distance over parts.
///
/// With `use_visibility`, only parts visible in both samples count; when they
/// share no visible part, the foreground embeddings are compared instead.
pub fn part_distance(a: &PartEmbeddings, b: &PartEmbeddings, use_visibility: bool) -> f64 {
    debug_assert_eq!(a.parts.len(), b.parts.len());
    let mut total = 0.0;
    let mut used = 0usize;
    for x in 0..a.parts.len() {
        if use_visibility && !(a.visibility[x] && b.visibility[x]) {
            continue;
        }
        total += euclidean(&a.parts[x], &b.parts[x]);
        used += 1;
    }
    if used == 0 {
        return euclidean(&a.foreground, &b.foreground);
    }
    total / used as f64
}

/// Number of parts that take part in a visibility-aware comparison.
pub fn shared_visible_parts(a: &PartEmbeddings, b: &PartEmbeddings) -> usize {
    a.visibility
        .iter()
        .zip(&b.visibility)
        .filter(|(x, y)| **x && **y)
        .count()
}

/// Differentiable `(N, N)` matrix of mean per-part distances for `(N, X, D)`
/// embeddings.
pub fn pairwise_part_distances(parts: &Tensor) -> Result<Tensor> {
    let diff = parts.unsqueeze(1)?.broadcast_sub(&parts.unsqueeze(0)?)?;
    Ok(safe_norm_last(&diff)?.mean(2)?)
}

#[derive(Debug, Clone)]
pub struct TripletOutput {
    /// Scalar loss tensor.
    pub loss: Tensor,
    /// Anchors that had at least one positive and one negative.
    pub anchors: Vec<usize>,
    pub hardest_positive: Vec<usize>,
    pub hardest_negative: Vec<usize>,
}

/// Batch-hard triplet loss on `(N, X, D)` part embeddings: per anchor, the
/// farthest same-identity sample and the nearest other-identity sample under
/// the mean part distance; hinge `[d_ap - d_an + margin]_+`, averaged over
/// anchors. Ties go to the lowest sample index.
pub fn part_triplet_loss(parts: &Tensor, identities: &[u32], cfg: &TripletConfig) -> Result<TripletOutput> {
    let (n, x, _) = parts.dims3()?;
    if identities.len() != n {
        return config_err(format!("{} identities for {n} embeddings", identities.len()));
    }
    if x != cfg.part_count {
        return config_err(format!("embeddings have {x} parts, triplet config expects {}", cfg.part_count));
    }
    if cfg.margin < 0.0 {
        return config_err("triplet margin must be non-negative");
    }
    let dist = pairwise_part_distances(parts)?;
    let values = dist.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;

    let mut anchors = Vec::new();
    let mut hardest_positive = Vec::new();
    let mut hardest_negative = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if identities[j] == identities[a] {
                if pos.is_none_or(|p| values[a][j] > values[a][p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| values[a][j] < values[a][q]) {
                neg = Some(j);
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            anchors.push(a);
            hardest_positive.push(p);
            hardest_negative.push(q);
        }
    }
    if anchors.is_empty() {
        return data_err("triplet batch needs two identities and a repeated identity");
    }

    let flat = dist.flatten_all()?;
    let index = |others: &[usize]| -> Result<Tensor> {
        let idx: Vec<u32> = anchors
            .iter()
            .zip(others)
            .map(|(&a, &o)| (a * n + o) as u32)
            .collect();
        Ok(Tensor::from_vec(idx, anchors.len(), parts.device())?)
    };
    let d_ap = flat.index_select(&index(&hardest_positive)?, 0)?;
    let d_an = flat.index_select(&index(&hardest_negative)?, 0)?;
    let loss = ((d_ap - d_an)? + cfg.margin)?.relu()?.mean_all()?;
    Ok(TripletOutput {
        loss,
        anchors,
        hardest_positive,
        hardest_negative,
    })
}

/// Identity classifier heads: one on the foreground embedding, one shared by
/// all part embeddings.
#[derive(Debug, Clone)]
pub struct IdClassifier {
    foreground: Linear,
    part: Linear,
    n_classes: usize,
}

impl IdClassifier {
    pub fn new(vs: &mut VarStore, name: &str, embed_dim: usize, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return config_err("identity classifier needs at least one class");
        }
        Ok(Self {
            foreground: Linear::new(vs, &format!("{name}.foreground"), embed_dim, n_classes)?,
            part: Linear::new(vs, &format!("{name}.part"), embed_dim, n_classes)?,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Logits for `(N, D)` foreground and `(N, X, D)` part embeddings.
    pub fn forward(&self, foreground: &Tensor, parts: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.foreground.forward(foreground)?, self.part.forward(parts)?))
    }
}

#[derive(Debug, Clone)]
pub struct IdLogits {
    /// `(N, C)`
    pub foreground: Tensor,
    /// `(N, X, C)`
    pub parts: Tensor,
    /// Parts whose logits enter the loss, `N x X`.
    pub part_visible: Vec<Vec<bool>>,
}

/// Mean label-smoothed cross-entropy of `(M, C)` logits.
pub fn smoothed_cross_entropy(logits: &Tensor, targets: &[u32], theta: f64) -> Result<Tensor> {
    let (m, c) = logits.dims2()?;
    if targets.len() != m {
        return config_err(format!("{} targets for {m} logit rows", targets.len()));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= c) {
        return data_err(format!("identity {t} outside 0..{c}"));
    }
    if !(0.0..1.0).contains(&theta) {
        return config_err(format!("smoothing rate {theta} outside [0, 1)"));
    }
    let off = theta / c as f64;
    let mut weights = vec![off; m * c];
    for (i, &t) in targets.iter().enumerate() {
        weights[i * c + t as usize] += 1.0 - theta;
    }
    let weights = Tensor::from_vec(weights, (m, c), logits.device())?.to_dtype(logits.dtype())?;
    let log_p = log_softmax_last(logits)?;
    Ok(((weights * log_p)?.sum_all()? * (-1.0 / m as f64))?)
}

/// Identity loss: foreground head on every sample, shared part head on every
/// visible part; the two head losses are averaged. Without any visible part
/// only the foreground head contributes.
pub fn id_loss(logits: &IdLogits, identities: &[u32], theta: f64) -> Result<Tensor> {
    let (n, x, c) = logits.parts.dims3()?;
    if logits.part_visible.len() != n || logits.part_visible.iter().any(|v| v.len() != x) {
        return config_err("part visibility mask does not match part logits");
    }
    let fg = smoothed_cross_entropy(&logits.foreground, identities, theta)?;

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, vis) in logits.part_visible.iter().enumerate() {
        for (p, &v) in vis.iter().enumerate() {
            if v {
                rows.push((i * x + p) as u32);
                targets.push(identities[i]);
            }
        }
    }
    if rows.is_empty() {
        return Ok(fg);
    }
    let idx = Tensor::from_vec(rows, targets.len(), logits.parts.device())?;
    let selected = logits.parts.reshape((n * x, c))?.index_select(&idx, 0)?;
    let part = smoothed_cross_entropy(&selected, &targets, theta)?;
    Ok(((fg + part)? * 0.5)?)
}

/// `L_tri + L_ID + gamma_part * L_part`.
pub fn total_loss(tri: &Tensor, id: &Tensor, part: &Tensor, gamma_part: f64) -> Result<Tensor> {
    Ok(((tri + id)? + (part * gamma_part)?)?)
}

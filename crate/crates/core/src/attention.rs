//! Multi-head scaled dot-product attention over a Lambda (or causal) mask.
//!
//! Softmax runs over the allowed keys of each row only; masked cells never
//! enter the sum. Query, key and value sequences are `seq_len x (n_heads *
//! head_dim)` matrices with heads laid out as contiguous column blocks.
//!
//! For RoPE the local branch uses the usual absolute-position rotation of both
//! query and key, which equals rotating the query by the true distance. Keys
//! reached only through the global branch stay unrotated and the query is
//! rotated to the distance limit instead. For Alibi both branches use the raw
//! vectors and a bias of `-m * min(d, l_pretrain)`.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::mask::{build_mask, LambdaMask, MaskParams};
use crate::pos_encoding::{
    dot, rotate_pairs, unrotate_pairs, AlibiParams, PositionEncoding, RopeParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Full causal mask, raw distances.
    VanillaCausal,
    /// Lambda mask with the distance limit.
    Lambda,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::VanillaCausal => "vanilla",
            AttentionMode::Lambda => "lambda",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "vanilla_causal" => Ok(AttentionMode::VanillaCausal),
            "lambda" => Ok(AttentionMode::Lambda),
            other => Err(Error::invalid(format!("unknown attention mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub mask_params: MaskParams,
    pub encoding: PositionEncoding,
    pub mode: AttentionMode,
}

impl AttentionConfig {
    pub fn new(
        n_heads: usize,
        head_dim: usize,
        mask_params: MaskParams,
        encoding: PositionEncoding,
        mode: AttentionMode,
    ) -> Result<Self> {
        let config = Self {
            n_heads,
            head_dim,
            mask_params,
            encoding,
            mode,
        };
        config.validate()?;
        Ok(config)
    }

    /// RoPE with the default base.
    pub fn rope(
        n_heads: usize,
        head_dim: usize,
        mask_params: MaskParams,
        mode: AttentionMode,
    ) -> Result<Self> {
        let rope = RopeParams::with_default_base(head_dim)?;
        Self::new(
            n_heads,
            head_dim,
            mask_params,
            PositionEncoding::Rope(rope),
            mode,
        )
    }

    /// Alibi with geometric slopes.
    pub fn alibi(
        n_heads: usize,
        head_dim: usize,
        mask_params: MaskParams,
        mode: AttentionMode,
    ) -> Result<Self> {
        let alibi = AlibiParams::geometric(n_heads)?;
        Self::new(
            n_heads,
            head_dim,
            mask_params,
            PositionEncoding::Alibi(alibi),
            mode,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::invalid("n_heads must be at least 1"));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "head_dim must be even, got {}",
                self.head_dim
            )));
        }
        self.mask_params.validate()?;
        match &self.encoding {
            PositionEncoding::Rope(r) if r.head_dim() != self.head_dim => {
                Err(Error::invalid(format!(
                    "RoPE head_dim {} differs from attention head_dim {}",
                    r.head_dim(),
                    self.head_dim
                )))
            }
            PositionEncoding::Alibi(a) if a.slopes().len() != self.n_heads => {
                Err(Error::invalid(format!(
                    "{} Alibi slopes for {} heads",
                    a.slopes().len(),
                    self.n_heads
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }

    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn mask(&self, seq_len: usize) -> Result<LambdaMask> {
        match self.mode {
            AttentionMode::VanillaCausal => LambdaMask::causal(seq_len),
            AttentionMode::Lambda => build_mask(seq_len, &self.mask_params),
        }
    }

    /// Empty cache suited to decoding in this mode.
    pub fn new_cache(&self) -> Result<KvCache> {
        match self.mode {
            AttentionMode::VanillaCausal => KvCache::unbounded(self.width()),
            AttentionMode::Lambda => KvCache::new(&self.mask_params, self.width()),
        }
    }

    fn slope(&self, head: usize) -> f64 {
        match &self.encoding {
            PositionEncoding::Alibi(a) => a.slopes()[head],
            PositionEncoding::Rope(_) => 0.0,
        }
    }

    /// Clamp applied to global-only distances (Alibi); none in vanilla mode.
    fn global_distance(&self, raw: usize) -> usize {
        match self.mode {
            AttentionMode::VanillaCausal => raw,
            AttentionMode::Lambda => raw.min(self.mask_params.l_pretrain),
        }
    }
}

/// Retained attention distributions, one row per (head, query).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    mask: LambdaMask,
    n_heads: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl AttentionWeights {
    fn new(mask: LambdaMask, n_heads: usize) -> Self {
        let mut offsets = Vec::with_capacity(mask.seq_len() + 1);
        offsets.push(0);
        for row in mask.rows() {
            offsets.push(offsets.last().unwrap() + row.len());
        }
        let per_head = *offsets.last().unwrap();
        Self {
            mask,
            n_heads,
            offsets,
            data: vec![0.0; per_head * n_heads],
        }
    }

    fn per_head(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn mask(&self) -> &LambdaMask {
        &self.mask
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Weights of query `i` in `head`, aligned with `mask().row(i).keys()`.
    pub fn row(&self, head: usize, i: usize) -> &[f64] {
        let base = head * self.per_head();
        &self.data[base + self.offsets[i]..base + self.offsets[i + 1]]
    }

    fn row_mut(&mut self, head: usize, i: usize) -> &mut [f64] {
        let base = head * self.per_head();
        &mut self.data[base + self.offsets[i]..base + self.offsets[i + 1]]
    }

    /// Dense `seq_len x seq_len` weight matrix of one head, zero off-mask.
    pub fn dense(&self, head: usize) -> Array2<f64> {
        let n = self.mask.seq_len();
        let mut out = Array2::zeros((n, n));
        for i in 0..n {
            for (j, w) in self.mask.row(i).keys().zip(self.row(head, i)) {
                out[[i, j]] = *w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `seq_len x (n_heads * head_dim)`.
    pub values: Array2<f64>,
    pub weights: Option<AttentionWeights>,
}

/// Per-head query/key vectors for the two branches.
struct HeadVectors {
    head_dim: usize,
    /// Local-branch query and key (rotated to their absolute positions for RoPE).
    q_local: Vec<f64>,
    k_local: Vec<f64>,
    /// Global-branch query (rotated to the distance limit for RoPE) and raw key.
    q_global: Vec<f64>,
    k_global: Vec<f64>,
}

impl HeadVectors {
    fn new(q: ArrayView2<f64>, k: ArrayView2<f64>, head: usize, config: &AttentionConfig) -> Self {
        let hd = config.head_dim;
        let cols = s![.., head * hd..(head + 1) * hd];
        let q_raw: Vec<f64> = q.slice(cols).iter().copied().collect();
        let k_raw: Vec<f64> = k.slice(cols).iter().copied().collect();
        match &config.encoding {
            PositionEncoding::Alibi(_) => Self {
                head_dim: hd,
                q_local: q_raw.clone(),
                k_local: k_raw.clone(),
                q_global: q_raw,
                k_global: k_raw,
            },
            PositionEncoding::Rope(rope) => {
                let mut q_local = q_raw.clone();
                let mut k_local = k_raw.clone();
                for (p, (qc, kc)) in q_local
                    .chunks_exact_mut(hd)
                    .zip(k_local.chunks_exact_mut(hd))
                    .enumerate()
                {
                    let angles = rope.angles(p);
                    rotate_pairs(qc, &angles);
                    rotate_pairs(kc, &angles);
                }
                let mut q_global = q_raw;
                if config.mode == AttentionMode::Lambda {
                    let fixed = rope.angles(config.mask_params.l_pretrain);
                    for qc in q_global.chunks_exact_mut(hd) {
                        rotate_pairs(qc, &fixed);
                    }
                }
                Self {
                    head_dim: hd,
                    q_local,
                    k_local,
                    q_global,
                    k_global: k_raw,
                }
            }
        }
    }

    fn vec(buf: &[f64], hd: usize, p: usize) -> &[f64] {
        &buf[p * hd..(p + 1) * hd]
    }

    fn local_dot(&self, i: usize, j: usize) -> f64 {
        let hd = self.head_dim;
        dot(
            Self::vec(&self.q_local, hd, i),
            Self::vec(&self.k_local, hd, j),
        )
    }

    fn global_dot(&self, i: usize, j: usize) -> f64 {
        let hd = self.head_dim;
        dot(
            Self::vec(&self.q_global, hd, i),
            Self::vec(&self.k_global, hd, j),
        )
    }
}

fn check_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: what.to_string(),
                position: i,
            });
        }
    }
    Ok(())
}

fn check_shapes(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    config: &AttentionConfig,
) -> Result<usize> {
    config.validate()?;
    let n = q.nrows();
    if n == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    for (name, m) in [("query", q), ("key", k), ("value", v)] {
        if m.nrows() != n || m.ncols() != config.width() {
            return Err(Error::invalid(format!(
                "{name} shape {:?}, expected ({n}, {})",
                m.dim(),
                config.width()
            )));
        }
    }
    check_finite(q, "attention query")?;
    check_finite(k, "attention key")?;
    check_finite(v, "attention value")?;
    Ok(n)
}

/// Softmax in place with max subtraction.
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Attention logits of row `i` over its allowed keys, in key order.
fn row_logits(
    hv: &HeadVectors,
    mask: &LambdaMask,
    i: usize,
    scale: f64,
    slope: f64,
    config: &AttentionConfig,
    out: &mut Vec<f64>,
) {
    out.clear();
    let row = mask.row(i);
    for j in row.global_only() {
        let d = config.global_distance(i - j);
        out.push(scale * hv.global_dot(i, j) - slope * d as f64);
    }
    for j in row.local.clone() {
        out.push(scale * hv.local_dot(i, j) - slope * (i - j) as f64);
    }
}

/// Attention logits of query `i` in `head` over its allowed keys, without the
/// softmax. Used by diagnostics.
pub fn logits_row(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    config: &AttentionConfig,
    head: usize,
    i: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    check_shapes(q, k, k, config)?;
    if head >= config.n_heads || i >= q.nrows() {
        return Err(Error::invalid(format!(
            "head {head} / row {i} out of range"
        )));
    }
    let mask = config.mask(q.nrows())?;
    let hv = HeadVectors::new(q.slice(s![..=i, ..]), k.slice(s![..=i, ..]), head, config);
    let mut logits = Vec::new();
    let scale = 1.0 / (config.head_dim as f64).sqrt();
    row_logits(
        &hv,
        &mask,
        i,
        scale,
        config.slope(head),
        config,
        &mut logits,
    );
    let row = mask.row(i);
    Ok(row
        .keys()
        .zip(logits)
        .map(|(j, w)| {
            let d = if row.local.contains(&j) {
                i - j
            } else if matches!(config.encoding, PositionEncoding::Rope(_))
                && config.mode == AttentionMode::Lambda
            {
                config.mask_params.l_pretrain
            } else {
                config.global_distance(i - j)
            };
            (j, d, w)
        })
        .collect())
}

/// Attention over full query/key/value sequences. `retain_weights` keeps every
/// row's distribution for diagnostics and backpropagation.
pub fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    config: &AttentionConfig,
    retain_weights: bool,
) -> Result<AttentionOutput> {
    let n = check_shapes(q, k, v, config)?;
    let mask = config.mask(n)?;
    let hd = config.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut values = Array2::zeros((n, config.width()));
    let mut weights = retain_weights.then(|| AttentionWeights::new(mask, config.n_heads));
    let mut probs = Vec::with_capacity(config.mask_params.max_row_len().min(n));

    for head in 0..config.n_heads {
        let hv = HeadVectors::new(q, k, head, config);
        let slope = config.slope(head);
        let v_head = v.slice(s![.., head * hd..(head + 1) * hd]);
        for i in 0..n {
            row_logits(&hv, &mask, i, scale, slope, config, &mut probs);
            softmax_in_place(&mut probs);
            let mut out = values.slice_mut(s![i, head * hd..(head + 1) * hd]);
            for (j, p) in mask.row(i).keys().zip(&probs) {
                out.scaled_add(*p, &v_head.row(j));
            }
            if let Some(w) = weights.as_mut() {
                w.row_mut(head, i).copy_from_slice(&probs);
            }
        }
    }
    Ok(AttentionOutput { values, weights })
}

/// Gradients of an [`attend`] call with respect to its inputs.
pub struct AttentionGrads {
    pub d_query: Array2<f64>,
    pub d_key: Array2<f64>,
    pub d_value: Array2<f64>,
}

/// Backpropagates `d_out` through attention, given the weights retained by the
/// forward pass.
pub fn attend_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    config: &AttentionConfig,
    weights: &AttentionWeights,
    d_out: ArrayView2<f64>,
) -> Result<AttentionGrads> {
    let n = check_shapes(q, k, v, config)?;
    if d_out.dim() != (n, config.width()) || weights.mask.seq_len() != n {
        return Err(Error::invalid("attention backward shape mismatch"));
    }
    let hd = config.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mask = &weights.mask;
    let mut d_query = Array2::zeros((n, config.width()));
    let mut d_key = Array2::zeros((n, config.width()));
    let mut d_value = Array2::zeros((n, config.width()));
    let mut d_logit = Vec::new();

    for head in 0..config.n_heads {
        let hv = HeadVectors::new(q, k, head, config);
        let cols = s![.., head * hd..(head + 1) * hd];
        let v_head = v.slice(cols);
        let do_head = d_out.slice(cols);
        let mut dq_local = vec![0.0; n * hd];
        let mut dk_local = vec![0.0; n * hd];
        let mut dq_global = vec![0.0; n * hd];
        let mut dk_global = vec![0.0; n * hd];
        let mut dv = d_value.slice_mut(cols);

        for i in 0..n {
            let row = mask.row(i);
            let p = weights.row(head, i);
            let go = do_head.row(i);
            d_logit.clear();
            for (j, &pj) in row.keys().zip(p) {
                d_logit.push(go.dot(&v_head.row(j)));
                dv.row_mut(j).scaled_add(pj, &go);
            }
            let mean: f64 = p.iter().zip(&d_logit).map(|(a, b)| a * b).sum();
            let n_global_only = row.global_only().len();
            for (idx, j) in row.keys().enumerate() {
                let ds = scale * p[idx] * (d_logit[idx] - mean);
                if ds == 0.0 {
                    continue;
                }
                let (qs, ks, dqs, dks) = if idx < n_global_only {
                    (&hv.q_global, &hv.k_global, &mut dq_global, &mut dk_global)
                } else {
                    (&hv.q_local, &hv.k_local, &mut dq_local, &mut dk_local)
                };
                for t in 0..hd {
                    dqs[i * hd + t] += ds * ks[j * hd + t];
                    dks[j * hd + t] += ds * qs[i * hd + t];
                }
            }
        }

        if let PositionEncoding::Rope(rope) = &config.encoding {
            for p in 0..n {
                let angles = rope.angles(p);
                unrotate_pairs(&mut dq_local[p * hd..(p + 1) * hd], &angles);
                unrotate_pairs(&mut dk_local[p * hd..(p + 1) * hd], &angles);
            }
            if config.mode == AttentionMode::Lambda {
                let fixed = rope.angles(config.mask_params.l_pretrain);
                for chunk in dq_global.chunks_exact_mut(hd) {
                    unrotate_pairs(chunk, &fixed);
                }
            }
        }
        for p in 0..n {
            for t in 0..hd {
                d_query[[p, head * hd + t]] = dq_local[p * hd + t] + dq_global[p * hd + t];
                d_key[[p, head * hd + t]] = dk_local[p * hd + t] + dk_global[p * hd + t];
            }
        }
    }
    Ok(AttentionGrads {
        d_query,
        d_key,
        d_value,
    })
}

/// Reference attention through dense `seq_len x seq_len` logit matrices and
/// an additive `-inf` mask. Quadratic in time and memory.
pub fn attend_dense(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    config: &AttentionConfig,
) -> Result<Array2<f64>> {
    let n = check_shapes(q, k, v, config)?;
    let mask = config.mask(n)?;
    let hd = config.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut values = Array2::zeros((n, config.width()));

    for head in 0..config.n_heads {
        let hv = HeadVectors::new(q, k, head, config);
        let slope = config.slope(head);
        let as_matrix = |buf: &[f64]| ArrayView2::from_shape((n, hd), buf).unwrap().to_owned();
        let local = as_matrix(&hv.q_local).dot(&as_matrix(&hv.k_local).t());
        let global = (config.mode == AttentionMode::Lambda)
            .then(|| as_matrix(&hv.q_global).dot(&as_matrix(&hv.k_global).t()));
        let mut scores = Array2::from_elem((n, n), f64::NEG_INFINITY);
        for i in 0..n {
            let row = mask.row(i);
            for j in 0..n {
                let additive = if row.local.contains(&j) {
                    scale * local[[i, j]] - slope * (i - j) as f64
                } else if row.global.contains(&j) {
                    let g = global.as_ref().map_or(local[[i, j]], |g| g[[i, j]]);
                    scale * g - slope * config.global_distance(i - j) as f64
                } else {
                    f64::NEG_INFINITY
                };
                scores[[i, j]] = additive;
            }
        }
        for mut row in scores.rows_mut() {
            softmax_in_place(row.as_slice_mut().unwrap());
        }
        let out = scores.dot(&v.slice(s![.., head * hd..(head + 1) * hd]));
        values
            .slice_mut(s![.., head * hd..(head + 1) * hd])
            .assign(&out);
    }
    Ok(values)
}

/// Result of attending one decode-time query.
#[derive(Debug, Clone)]
pub struct SingleOutput {
    /// `n_heads * head_dim` values.
    pub values: Vec<f64>,
    /// Per head, the distribution over visible cache entries in position order.
    pub weights: Vec<Vec<f64>>,
    pub positions: Vec<usize>,
}

/// Decode step: appends this token's key/value to `cache`, then attends the
/// query (at position `cache.next_position()` before the append) over the
/// entries the mask row allows.
pub fn attend_single(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &mut KvCache,
    config: &AttentionConfig,
) -> Result<SingleOutput> {
    config.validate()?;
    let width = config.width();
    if q.len() != width || cache.width() != width {
        return Err(Error::invalid(format!(
            "query width {} / cache width {} but config width {width}",
            q.len(),
            cache.width()
        )));
    }
    let expect_bounded = config.mode == AttentionMode::Lambda;
    if cache.is_bounded() != expect_bounded
        || (expect_bounded
            && (cache.n_global() != config.mask_params.n_global
                || cache.n_local() != Some(config.mask_params.n_local)
                || cache.l_pretrain() != Some(config.mask_params.l_pretrain)))
    {
        return Err(Error::state(format!(
            "cache layout does not match {} attention",
            config.mode
        )));
    }
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        if x.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("decode {name}"),
                position: cache.next_position(),
            });
        }
    }
    cache.push(k, v)?;
    let (i, entries) = cache.entries_for_last()?;
    let n_local = config.mask_params.n_local;
    let hd = config.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut values = vec![0.0; width];
    let mut weights = Vec::with_capacity(config.n_heads);
    let mut qa = vec![0.0; hd];
    let mut qg = vec![0.0; hd];
    let mut kr = vec![0.0; hd];

    for head in 0..config.n_heads {
        let cols = head * hd..(head + 1) * hd;
        let slope = config.slope(head);
        qa.copy_from_slice(&q[cols.clone()]);
        qg.copy_from_slice(&q[cols.clone()]);
        if let PositionEncoding::Rope(rope) = &config.encoding {
            rotate_pairs(&mut qa, &rope.angles(i));
            if expect_bounded {
                rotate_pairs(&mut qg, &rope.angles(config.mask_params.l_pretrain));
            }
        }
        let mut logits: Vec<f64> = entries
            .iter()
            .map(|e| {
                let raw = i - e.position;
                let key = &e.key[cols.clone()];
                let in_local = !expect_bounded || raw < n_local;
                if in_local {
                    let dot_val = match &config.encoding {
                        PositionEncoding::Rope(rope) => {
                            kr.copy_from_slice(key);
                            rotate_pairs(&mut kr, &rope.angles(e.position));
                            dot(&qa, &kr)
                        }
                        PositionEncoding::Alibi(_) => dot(&qa, key),
                    };
                    scale * dot_val - slope * raw as f64
                } else {
                    scale * dot(&qg, key) - slope * e.distance.value() as f64
                }
            })
            .collect();
        softmax_in_place(&mut logits);
        for (e, p) in entries.iter().zip(&logits) {
            for (o, x) in values[cols.clone()].iter_mut().zip(&e.value[cols.clone()]) {
                *o += p * x;
            }
        }
        weights.push(logits);
    }
    let positions = entries.iter().map(|e| e.position).collect();
    Ok(SingleOutput {
        values,
        weights,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, w: usize, amp: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, w), |_| rng.random_range(-amp..amp))
    }

    fn rope_config(mode: AttentionMode, g: usize, l: usize, lp: usize) -> AttentionConfig {
        AttentionConfig::rope(2, 4, MaskParams::new(g, l, lp).unwrap(), mode).unwrap()
    }

    fn alibi_config(mode: AttentionMode, g: usize, l: usize, lp: usize) -> AttentionConfig {
        AttentionConfig::alibi(2, 4, MaskParams::new(g, l, lp).unwrap(), mode).unwrap()
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn singleton_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = rope_config(AttentionMode::Lambda, 2, 4, 4);
        let (q, k, v) = (
            random(&mut rng, 1, 8, 1.0),
            random(&mut rng, 1, 8, 1.0),
            random(&mut rng, 1, 8, 1.0),
        );
        let out = attend(q.view(), k.view(), v.view(), &config, true).unwrap();
        assert!(max_diff(&out.values, &v) < 1e-15);
        assert_eq!(out.weights.unwrap().row(1, 0), &[1.0]);
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let config = alibi_config(AttentionMode::Lambda, 1, 2, 2);
        let config = AttentionConfig {
            encoding: PositionEncoding::Alibi(AlibiParams::new(vec![1e-300, 1e-300]).unwrap()),
            ..config
        };
        let q = Array2::from_elem((5, 8), 0.5);
        let v = Array2::from_shape_fn((5, 8), |(i, _)| i as f64);
        let out = attend(q.view(), q.view(), v.view(), &config, true).unwrap();
        let w = out.weights.unwrap();
        for i in 0..5 {
            let row = w.row(0, i);
            for p in row {
                assert!((p - 1.0 / row.len() as f64).abs() < 1e-12);
            }
        }
        assert_eq!(w.row(0, 4).len(), 3);
    }

    #[test]
    fn short_sequences_match_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for config in [
            rope_config(AttentionMode::Lambda, 2, 6, 8),
            alibi_config(AttentionMode::Lambda, 2, 6, 8),
        ] {
            for n in 1..=6 {
                let (q, k, v) = (
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                );
                let lam = attend(q.view(), k.view(), v.view(), &config, false).unwrap();
                let van = attend(
                    q.view(),
                    k.view(),
                    v.view(),
                    &config.with_mode(AttentionMode::VanillaCausal),
                    false,
                )
                .unwrap();
                assert!(max_diff(&lam.values, &van.values) < 1e-12);
            }
        }
    }

    #[test]
    fn ranged_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for base in [
            rope_config(AttentionMode::Lambda, 2, 3, 5),
            alibi_config(AttentionMode::Lambda, 2, 3, 5),
        ] {
            for mode in [AttentionMode::Lambda, AttentionMode::VanillaCausal] {
                let config = base.with_mode(mode);
                let n = 17;
                let (q, k, v) = (
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                );
                let ranged = attend(q.view(), k.view(), v.view(), &config, true).unwrap();
                let dense = attend_dense(q.view(), k.view(), v.view(), &config).unwrap();
                assert!(max_diff(&ranged.values, &dense) < 1e-12);
                let w = ranged.weights.unwrap();
                for h in 0..2 {
                    for (i, row) in w.dense(h).rows().into_iter().enumerate() {
                        assert!((row.sum() - 1.0).abs() < 1e-12);
                        for j in 0..n {
                            if !w.mask().row(i).contains(j) {
                                assert_eq!(row[j], 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn global_branch_uses_fixed_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = rope_config(AttentionMode::Lambda, 2, 3, 4);
        let rope = match &config.encoding {
            PositionEncoding::Rope(r) => r.clone(),
            _ => unreachable!(),
        };
        let n = 12;
        let (q, k) = (random(&mut rng, n, 8, 1.0), random(&mut rng, n, 8, 1.0));
        let logits = logits_row(q.view(), k.view(), &config, 1, 11).unwrap();
        let qh: Vec<f64> = q.slice(s![11, 4..8]).to_vec();
        for (j, d, w) in logits {
            let kh: Vec<f64> = k.slice(s![j, 4..8]).to_vec();
            let expect =
                crate::pos_encoding::rope_logit(&qh, &kh, crate::mask::EffectiveDistance(d), &rope)
                    .unwrap();
            assert!((w - expect).abs() < 1e-12, "key {j}");
            if j < 2 {
                assert_eq!(d, 4);
            }
        }
    }

    #[test]
    fn nan_reports_row() {
        let config = rope_config(AttentionMode::Lambda, 1, 2, 2);
        let mut q = Array2::zeros((4, 8));
        q[[2, 3]] = f64::NAN;
        let z = Array2::zeros((4, 8));
        match attend(q.view(), z.view(), z.view(), &config, false) {
            Err(Error::NonFinite { position, .. }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        let bad = Array2::zeros((3, 8));
        assert!(matches!(
            attend(z.view(), bad.view(), z.view(), &config, false),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn large_logits_stay_finite() {
        let config = alibi_config(AttentionMode::VanillaCausal, 0, 4, 4);
        let q = Array2::from_elem((4, 8), 70.0);
        let out = attend(q.view(), q.view(), q.view(), &config, false).unwrap();
        assert!(out.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn single_step_matches_full_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, l) = (2, 4);
        for base in [
            rope_config(AttentionMode::Lambda, g, l, 6),
            alibi_config(AttentionMode::Lambda, g, l, 6),
        ] {
            for mode in [AttentionMode::Lambda, AttentionMode::VanillaCausal] {
                let config = base.with_mode(mode);
                let n = 4 * l + 3;
                let (q, k, v) = (
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                    random(&mut rng, n, 8, 2.0),
                );
                let full = attend(q.view(), k.view(), v.view(), &config, true).unwrap();
                let mut cache = config.new_cache().unwrap();
                for i in 0..n {
                    let out = attend_single(
                        q.row(i).as_slice().unwrap(),
                        k.row(i).as_slice().unwrap(),
                        v.row(i).as_slice().unwrap(),
                        &mut cache,
                        &config,
                    )
                    .unwrap();
                    if i == 0 {
                        assert_eq!(out.positions, vec![0]);
                    }
                    let expect: Vec<usize> = config.mask(n).unwrap().row(i).keys().collect();
                    assert_eq!(out.positions, expect);
                    for (a, b) in out.values.iter().zip(full.values.row(i)) {
                        assert!((a - b).abs() < 1e-10);
                    }
                    let w = full.weights.as_ref().unwrap();
                    for h in 0..2 {
                        for (a, b) in out.weights[h].iter().zip(w.row(h, i)) {
                            assert!((a - b).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cache_layout_mismatch() {
        let config = rope_config(AttentionMode::Lambda, 1, 2, 2);
        let mut cache = KvCache::unbounded(8).unwrap();
        let x = [0.0; 8];
        assert!(matches!(
            attend_single(&x, &x, &x, &mut cache, &config),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for base in [
            rope_config(AttentionMode::Lambda, 2, 3, 5),
            alibi_config(AttentionMode::Lambda, 2, 3, 5),
        ] {
            for mode in [AttentionMode::Lambda, AttentionMode::VanillaCausal] {
                let config = base.with_mode(mode);
                let n = 9;
                let (q, k, v) = (
                    random(&mut rng, n, 8, 1.0),
                    random(&mut rng, n, 8, 1.0),
                    random(&mut rng, n, 8, 1.0),
                );
                let g = random(&mut rng, n, 8, 1.0);
                let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
                    (attend(q.view(), k.view(), v.view(), &config, false)
                        .unwrap()
                        .values
                        * &g)
                        .sum()
                };
                let fwd = attend(q.view(), k.view(), v.view(), &config, true).unwrap();
                let grads = attend_backward(
                    q.view(),
                    k.view(),
                    v.view(),
                    &config,
                    fwd.weights.as_ref().unwrap(),
                    g.view(),
                )
                .unwrap();
                let h = 1e-6;
                for (which, analytic) in
                    [(0, &grads.d_query), (1, &grads.d_key), (2, &grads.d_value)]
                {
                    for idx in [(0usize, 0usize), (3, 5), (8, 7), (6, 2)] {
                        let mut plus = [q.clone(), k.clone(), v.clone()];
                        let mut minus = [q.clone(), k.clone(), v.clone()];
                        plus[which][idx] += h;
                        minus[which][idx] -= h;
                        let numeric = (loss(&plus[0], &plus[1], &plus[2])
                            - loss(&minus[0], &minus[1], &minus[2]))
                            / (2.0 * h);
                        assert!(
                            (numeric - analytic[idx]).abs() < 1e-6,
                            "{which} {idx:?}: {numeric} vs {}",
                            analytic[idx]
                        );
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn heads_permute_with_outputs(seed in 0u64..1000, n in 1usize..20) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let config = rope_config(AttentionMode::Lambda, 1, 3, 4);
                let (q, k, v) = (random(&mut rng, n, 8, 1.0), random(&mut rng, n, 8, 1.0), random(&mut rng, n, 8, 1.0));
                let swap = |m: &Array2<f64>| {
                    let mut out = m.clone();
                    out.slice_mut(s![.., 0..4]).assign(&m.slice(s![.., 4..8]));
                    out.slice_mut(s![.., 4..8]).assign(&m.slice(s![.., 0..4]));
                    out
                };
                let a = attend(q.view(), k.view(), v.view(), &config, false).unwrap().values;
                let b = attend(swap(&q).view(), swap(&k).view(), swap(&v).view(), &config, false).unwrap().values;
                prop_assert!(max_diff(&swap(&a), &b) < 1e-12);
            }
        }
    }
}

//! Measurements of the three failure factors on a toy model: attention logit
//! magnitude against distance, attention entropy against context length, and
//! position information carried by hidden states.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::attention::{logits_row, AttentionMode};
use crate::error::{Error, Result};
use crate::model::ToyModel;

pub const DEFAULT_BUCKET_WIDTH: usize = 64;
const PCA_TOL: f64 = 1e-6;
const PCA_MAX_ITERS: usize = 1000;

/// Statistics of the logits whose distance falls in `[lo, hi)`. Empty buckets
/// have `count == 0` and NaN statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBucket {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub absmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitProfile {
    pub layer: usize,
    pub head: usize,
    pub buckets: Vec<LogitBucket>,
    /// Largest absolute logit over the row.
    pub bound: f64,
}

impl LogitProfile {
    /// Largest absolute logit over buckets lying entirely inside `[lo, hi)`.
    pub fn absmax_between(&self, lo: usize, hi: usize) -> Option<f64> {
        self.buckets
            .iter()
            .filter(|b| b.count > 0 && b.lo >= lo && b.hi <= hi)
            .map(|b| b.absmax)
            .reduce(f64::max)
    }
}

/// Buckets `(distance, logit)` pairs into contiguous bins of `width` covering
/// `[0, max distance]`. With `limit`, a distance above it is a bug and panics.
pub fn bucket_logits(
    pairs: &[(usize, f64)],
    width: usize,
    limit: Option<usize>,
) -> Result<Vec<LogitBucket>> {
    if width == 0 {
        return Err(Error::invalid("bucket width must be positive"));
    }
    let max_d = pairs.iter().map(|p| p.0).max().unwrap_or(0);
    if let Some(limit) = limit {
        assert!(
            max_d <= limit,
            "distance {max_d} evaluated beyond the limit {limit}"
        );
    }
    let n = max_d / width + 1;
    let mut buckets: Vec<LogitBucket> = (0..n)
        .map(|b| LogitBucket {
            lo: b * width,
            hi: (b + 1) * width,
            count: 0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            mean: 0.0,
            absmax: 0.0,
        })
        .collect();
    for &(d, x) in pairs {
        let b = &mut buckets[d / width];
        b.count += 1;
        b.min = b.min.min(x);
        b.max = b.max.max(x);
        b.mean += x;
        b.absmax = b.absmax.max(x.abs());
    }
    for b in &mut buckets {
        if b.count == 0 {
            b.min = f64::NAN;
            b.max = f64::NAN;
            b.mean = f64::NAN;
            b.absmax = f64::NAN;
        } else {
            b.mean /= b.count as f64;
        }
    }
    Ok(buckets)
}

fn check_layer_head(model: &ToyModel, layer: usize, head: usize) -> Result<()> {
    if layer >= model.config.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    if head >= model.config.n_heads {
        return Err(Error::invalid(format!(
            "head {head} out of range for {} heads",
            model.config.n_heads
        )));
    }
    Ok(())
}

/// Logits of the last query in `layer`/`head`, bucketed by the distance the
/// positional encoding actually sees.
pub fn logit_profile(
    model: &ToyModel,
    tokens: &[u32],
    layer: usize,
    head: usize,
    mode: AttentionMode,
    bucket_width: usize,
) -> Result<LogitProfile> {
    if tokens.len() < 2 {
        return Err(Error::invalid("logit profile needs at least two tokens"));
    }
    check_layer_head(model, layer, head)?;
    let trace = model.trace(tokens, mode, false)?;
    let lt = &trace.layers[layer];
    let config = model.attention_config(mode);
    let row = logits_row(lt.q.view(), lt.k.view(), &config, head, tokens.len() - 1)?;
    let pairs: Vec<(usize, f64)> = row.iter().map(|&(_, d, x)| (d, x)).collect();
    let limit = (mode == AttentionMode::Lambda).then_some(config.mask_params.l_pretrain);
    let buckets = bucket_logits(&pairs, bucket_width, limit)?;
    let bound = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    Ok(LogitProfile {
        layer,
        head,
        buckets,
        bound,
    })
}

/// Shannon entropy in nats of a probability vector.
pub fn attention_entropy(weights: &[f64]) -> Result<f64> {
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::invalid(format!(
            "attention weight {w} is negative or NaN"
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!(
            "attention weights sum to {total}, not 1"
        )));
    }
    Ok(weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyPoint {
    pub length: usize,
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
}

/// Attention entropy of the last token of each prefix length in `lengths`,
/// for every layer and head. Causality makes the last row of a prefix equal
/// to the corresponding row of one pass over all of `tokens`.
pub fn entropy_curve(
    model: &ToyModel,
    tokens: &[u32],
    mode: AttentionMode,
    lengths: &[usize],
) -> Result<Vec<EntropyPoint>> {
    if tokens.len() < 2 {
        return Err(Error::invalid("entropy curve needs at least two tokens"));
    }
    if let Some(&n) = lengths.iter().find(|&&n| n == 0 || n > tokens.len()) {
        return Err(Error::invalid(format!(
            "prefix length {n} outside 1..={}",
            tokens.len()
        )));
    }
    let trace = model.trace(tokens, mode, true)?;
    let mut out = Vec::with_capacity(lengths.len() * model.config.n_layers * model.config.n_heads);
    for &n in lengths {
        for (layer, lt) in trace.layers.iter().enumerate() {
            let weights = lt.attn.weights.as_ref().expect("weights retained");
            for head in 0..model.config.n_heads {
                out.push(EntropyPoint {
                    length: n,
                    layer,
                    head,
                    entropy: attention_entropy(weights.row(head, n - 1))?,
                });
            }
        }
    }
    Ok(out)
}

/// Mean entropy over layers and heads at prefix length `n`.
pub fn mean_entropy_at(curve: &[EntropyPoint], n: usize) -> Option<f64> {
    let vals: Vec<f64> = curve
        .iter()
        .filter(|p| p.length == n)
        .map(|p| p.entropy)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Powers of two up to `max_len`, plus `max_len` itself.
pub fn doubling_lengths(max_len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |n| n.checked_mul(2))
        .take_while(|&n| n < max_len)
        .collect();
    if max_len > 0 {
        out.push(max_len);
    }
    out
}

/// Top two principal components of a row-sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    pub components: [Array1<f64>; 2],
    /// Eigenvalues of the covariance for the two components.
    pub variances: [f64; 2],
    pub explained_ratio: [f64; 2],
    /// Set when the covariance has rank below two; the second component is zero.
    pub rank_deficient: bool,
}

impl Pca {
    pub fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let centered = &x - &self.mean;
        let mut out = Array2::zeros((x.nrows(), 2));
        for (c, comp) in self.components.iter().enumerate() {
            out.column_mut(c).assign(&centered.dot(comp));
        }
        out
    }
}

fn power_iteration(cov: &Array2<f64>) -> (Array1<f64>, f64) {
    let d = cov.nrows();
    let mut v = Array1::from_iter((0..d).map(|i| 1.0 + 1.0 / (i + 1) as f64));
    v /= v.dot(&v).sqrt();
    for _ in 0..PCA_MAX_ITERS {
        let mut next = cov.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return (Array1::zeros(d), 0.0);
        }
        next /= norm;
        let delta = (&next - &v).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
    let lambda = v.dot(&cov.dot(&v));
    (v, lambda)
}

/// Two-component PCA by power iteration with deflation. Components are sign
/// normalized so their first non-negligible entry is positive.
pub fn pca2(x: ArrayView2<f64>) -> Result<Pca> {
    if x.nrows() < 2 || x.ncols() == 0 {
        return Err(Error::invalid(
            "PCA needs at least two samples of positive dimension",
        ));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let mut cov = centered.t().dot(&centered) / x.nrows() as f64;
    let total: f64 = cov.diag().sum();
    let (v1, l1) = power_iteration(&cov);
    let outer = |v: &Array1<f64>| {
        let col = v.view().insert_axis(Axis(1));
        col.dot(&col.t())
    };
    cov -= &(outer(&v1) * l1);
    let (mut v2, mut l2) = power_iteration(&cov);
    let rank_deficient = total <= 0.0 || l2 <= PCA_TOL * total;
    if rank_deficient {
        v2 = Array1::zeros(x.ncols());
        l2 = 0.0;
    }
    let ratio = |l: f64| if total > 0.0 { l / total } else { 0.0 };
    Ok(Pca {
        mean,
        explained_ratio: [ratio(l1), ratio(l2)],
        variances: [l1, l2],
        components: [v1, v2],
        rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionProjection {
    pub layer: usize,
    /// `(position, pc1, pc2)` per token.
    pub coords: Vec<(usize, f64, f64)>,
    pub pca: Pca,
}

impl PositionProjection {
    /// Distance between the mean `(pc1, pc2)` of two position ranges over the
    /// pooled within-range standard deviation.
    pub fn separation(&self, a: Range<usize>, b: Range<usize>) -> f64 {
        let pick = |r: &Range<usize>| -> Vec<[f64; 2]> {
            self.coords
                .iter()
                .filter(|c| r.contains(&c.0))
                .map(|c| [c.1, c.2])
                .collect()
        };
        let (xa, xb) = (pick(&a), pick(&b));
        let stats = |x: &[[f64; 2]], c: usize| {
            let m = x.iter().map(|p| p[c]).sum::<f64>() / x.len() as f64;
            let v =
                x.iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0).max(1.0);
            (m, v)
        };
        let mut dist2 = 0.0;
        let mut var = 0.0;
        for c in 0..2 {
            let ((ma, va), (mb, vb)) = (stats(&xa, c), stats(&xb, c));
            dist2 += (ma - mb).powi(2);
            var += (va + vb) / 4.0;
        }
        dist2.sqrt() / var.sqrt()
    }
}

/// Projects the residual stream after `layer`, pooled over `seqs`, onto its
/// top two principal components. Coordinates keep each token's position in
/// its own sequence. Uses the model's configured attention mode.
pub fn position_projection(
    model: &ToyModel,
    seqs: &[&[u32]],
    layer: usize,
) -> Result<PositionProjection> {
    if seqs.is_empty() || seqs.iter().map(|s| s.len()).sum::<usize>() < 3 {
        return Err(Error::invalid(
            "position projection needs at least three tokens",
        ));
    }
    check_layer_head(model, layer, 0)?;
    let states = seqs
        .iter()
        .map(|s| {
            Ok(
                model.trace(s, model.config.attention.mode, false)?.layers[layer]
                    .x_out
                    .clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = states.iter().map(|s| s.view()).collect();
    let hidden = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let pca = pca2(hidden.view())?;
    let proj = pca.project(hidden.view());
    let positions = seqs.iter().flat_map(|s| 0..s.len());
    let coords = positions
        .zip(proj.rows())
        .map(|(i, r)| (i, r[0], r[1]))
        .collect();
    Ok(PositionProjection { layer, coords, pca })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub logit_stats: Vec<LogitProfile>,
    pub entropy_curve: Vec<EntropyPoint>,
    /// Largest absolute logit over all profiles.
    pub logit_bound: f64,
    pub pca_projection: PositionProjection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    pub mode: AttentionMode,
    pub bucket_width: usize,
    pub head: usize,
    pub pca_layer: usize,
    /// Tokens fed to the PCA, taken from the start of the sequence.
    pub pca_window: usize,
}

impl DiagnosticsConfig {
    pub fn for_model(model: &ToyModel, mode: AttentionMode) -> Self {
        Self {
            mode,
            bucket_width: DEFAULT_BUCKET_WIDTH,
            head: 0,
            pca_layer: 0,
            pca_window: model.config.train_len,
        }
    }
}

/// Logit profiles for `head` in every layer, the entropy curve at doubling
/// lengths, and the PCA projection of the first `pca_window` tokens.
pub fn run_diagnostics(
    model: &ToyModel,
    tokens: &[u32],
    config: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    let logit_stats = (0..model.config.n_layers)
        .map(|l| {
            logit_profile(
                model,
                tokens,
                l,
                config.head,
                config.mode,
                config.bucket_width,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let logit_bound = logit_stats.iter().map(|p| p.bound).fold(0.0, f64::max);
    let entropy_curve = entropy_curve(model, tokens, config.mode, &doubling_lengths(tokens.len()))?;
    let window = config.pca_window.min(tokens.len());
    let pca_projection = position_projection(model, &[&tokens[..window]], config.pca_layer)?;
    Ok(DiagnosticsReport {
        logit_stats,
        entropy_curve,
        logit_bound,
        pca_projection,
    })
}

impl DiagnosticsReport {
    pub fn entropy_csv(&self) -> String {
        let mut s = String::from("length,layer,head,entropy\n");
        for p in &self.entropy_curve {
            writeln!(s, "{},{},{},{}", p.length, p.layer, p.head, p.entropy).unwrap();
        }
        s
    }

    pub fn logits_csv(&self) -> String {
        let mut s = String::from("layer,head,bucket_lo,bucket_hi,count,min,max,mean,absmax\n");
        for p in &self.logit_stats {
            for b in &p.buckets {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    p.layer, p.head, b.lo, b.hi, b.count, b.min, b.max, b.mean, b.absmax
                )
                .unwrap();
            }
        }
        s
    }

    pub fn pca_csv(&self) -> String {
        let mut s = String::from("position,pc1,pc2\n");
        for (pos, a, b) in &self.pca_projection.coords {
            writeln!(s, "{pos},{a},{b}").unwrap();
        }
        s
    }

    /// Writes `entropy.csv`, `logits.csv` and `pca.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("entropy.csv", self.entropy_csv()),
            ("logits.csv", self.logits_csv()),
            ("pca.csv", self.pca_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::softmax_in_place;
    use crate::mask::MaskParams;
    use crate::model::ToyModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(n_global: usize, n_local: usize, l_pretrain: usize) -> ToyModel {
        let cfg = ToyModelConfig::rope(13, 16, 2, 2, 8, 4)
            .unwrap()
            .with_mask(MaskParams::new(n_global, n_local, l_pretrain).unwrap())
            .unwrap();
        let mut m = ToyModel::init(cfg).unwrap();
        m.perturb(&mut ChaCha8Rng::seed_from_u64(9), 0.3);
        m
    }

    #[test]
    fn entropy_examples() {
        assert!((attention_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(attention_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            attention_entropy(&[1.5, -0.5]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(attention_entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn entropy_lower_bound_for_bounded_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [8, 64, 512, 4096] {
            for b in [1.0, 2.0, 5.0] {
                for _ in 0..5 {
                    let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-b..=b)).collect();
                    softmax_in_place(&mut w);
                    assert!(attention_entropy(&w).unwrap() >= (n as f64).ln() - 2.0 * b);
                }
            }
        }
    }

    #[test]
    fn bucketing_covers_without_gaps() {
        let pairs = [(0, 1.0), (5, -3.0), (130, 2.0)];
        let b = bucket_logits(&pairs, 64, None).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!((b[0].lo, b[0].hi, b[0].count), (0, 64, 2));
        assert_eq!(
            (b[0].min, b[0].max, b[0].mean, b[0].absmax),
            (-3.0, 1.0, -1.0, 3.0)
        );
        assert_eq!(b[1].count, 0);
        assert!(b[1].mean.is_nan());
        assert_eq!(b[2].absmax, 2.0);
    }

    #[test]
    #[should_panic(expected = "beyond the limit")]
    fn bucketing_asserts_limit() {
        let _ = bucket_logits(&[(9, 0.0)], 4, Some(8));
    }

    #[test]
    fn identical_rows_on_the_fixed_distance_branch_give_equal_logits() {
        // Every key but the query itself is global-only, so all of them are
        // scored at distance l_pretrain against the same unrotated key vector.
        let cfg = crate::attention::AttentionConfig::rope(
            1,
            4,
            MaskParams::new(10, 1, 4).unwrap(),
            AttentionMode::Lambda,
        )
        .unwrap();
        let q = Array2::from_shape_fn((10, 4), |(_, j)| [0.3, -1.2, 0.7, 2.0][j]);
        let row = logits_row(q.view(), q.view(), &cfg, 0, 9).unwrap();
        let pairs: Vec<(usize, f64)> = row.iter().map(|&(_, d, x)| (d, x)).collect();
        let b = bucket_logits(&pairs, 4, Some(4)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].count, 9);
        assert_eq!(b[1].min, b[1].max);
        assert!((b[1].absmax - b[1].mean.abs()).abs() < 1e-12);
    }

    #[test]
    fn lambda_profile_is_capped_at_l_pretrain() {
        let m = model(2, 6, 8);
        let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 13) as u32).collect();
        let p = logit_profile(&m, &tokens, 1, 0, AttentionMode::Lambda, 4).unwrap();
        assert_eq!(p.buckets.last().unwrap().lo, 8);
        // Global-branch logits sit at exactly l_pretrain and match a direct computation.
        let trace = m.trace(&tokens, AttentionMode::Lambda, false).unwrap();
        let lt = &trace.layers[1];
        let cfg = m.attention_config(AttentionMode::Lambda);
        let row = logits_row(lt.q.view(), lt.k.view(), &cfg, 0, 39).unwrap();
        let rope = match &cfg.encoding {
            crate::pos_encoding::PositionEncoding::Rope(r) => r.clone(),
            _ => unreachable!(),
        };
        let hd = cfg.head_dim;
        for &(j, d, x) in row.iter().filter(|r| r.0 < 2) {
            assert_eq!(d, 8);
            let q = lt.q.row(39).to_vec();
            let k = lt.k.row(j).to_vec();
            let direct = crate::pos_encoding::rope_logit(
                &q[..hd],
                &k[..hd],
                crate::mask::EffectiveDistance(8),
                &rope,
            )
            .unwrap();
            assert!((x - direct).abs() < 1e-9);
        }
        assert!(logit_profile(&m, &tokens, 2, 0, AttentionMode::Lambda, 4).is_err());
        assert!(logit_profile(&m, &tokens, 0, 2, AttentionMode::Lambda, 4).is_err());
    }

    #[test]
    fn lambda_entropy_never_exceeds_support_bound() {
        let m = model(2, 6, 8);
        let tokens: Vec<u32> = (0..60).map(|i| (i * 5 % 13) as u32).collect();
        let curve = entropy_curve(
            &m,
            &tokens,
            AttentionMode::Lambda,
            &(1..=60).collect::<Vec<_>>(),
        )
        .unwrap();
        let cap = 8f64.ln();
        assert!(curve.iter().all(|p| p.entropy <= cap + 1e-12));
        assert!(curve
            .iter()
            .filter(|p| p.length == 1)
            .all(|p| p.entropy == 0.0));
    }

    #[test]
    fn pca_rank_one_and_orthonormal() {
        let x = Array2::from_shape_fn((20, 3), |(i, j)| i as f64 * [1.0, 2.0, -1.0][j]);
        let p = pca2(x.view()).unwrap();
        assert!(p.rank_deficient);
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-9);
        assert!(p.components[1].iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Array2::from_shape_fn((50, 6), |(_, j)| {
            rng.random_range(-1.0..1.0) * (6 - j) as f64
        });
        let p = pca2(y.view()).unwrap();
        assert!(!p.rank_deficient);
        assert!((p.components[0].dot(&p.components[0]) - 1.0).abs() < 1e-5);
        assert!((p.components[1].dot(&p.components[1]) - 1.0).abs() < 1e-5);
        assert!(p.components[0].dot(&p.components[1]).abs() < 1e-5);
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn pca_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = Array2::from_shape_fn((30, 4), |(_, j)| {
            rng.random_range(-1.0..1.0) * (4 - j) as f64
        });
        let mut rev = y.clone();
        rev.invert_axis(Axis(0));
        let (a, b) = (pca2(y.view()).unwrap(), pca2(rev.view()).unwrap());
        for c in 0..2 {
            let diff = (&a.components[c] - &b.components[c])
                .mapv(f64::abs)
                .fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-5);
        }
    }

    #[test]
    fn separation_uses_both_coordinates() {
        let x = Array2::from_shape_fn((4, 2), |(i, j)| (i * (j + 1)) as f64);
        let proj = PositionProjection {
            layer: 0,
            coords: vec![(0, 0.0, 0.0), (1, 2.0, 0.0), (2, 4.0, 3.0), (3, 6.0, 3.0)],
            pca: pca2(x.view()).unwrap(),
        };
        assert!((proj.separation(0..2, 2..4) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_projection_keeps_positions() {
        let m = model(2, 6, 8);
        let a: Vec<u32> = (0..8).collect();
        let b: Vec<u32> = (3..11).collect();
        let proj = position_projection(&m, &[&a, &b], 1).unwrap();
        assert_eq!(proj.coords.len(), 16);
        assert_eq!(proj.coords[8].0, 0);
        assert!(position_projection(&m, &[], 1).is_err());
    }

    #[test]
    fn report_csvs() {
        let m = model(2, 6, 8);
        let tokens: Vec<u32> = (0..20).map(|i| (i * 3 % 13) as u32).collect();
        let report = run_diagnostics(
            &m,
            &tokens,
            &DiagnosticsConfig::for_model(&m, AttentionMode::VanillaCausal),
        )
        .unwrap();
        assert_eq!(report.logit_stats.len(), 2);
        assert_eq!(report.pca_projection.coords.len(), 8);
        let dir = tempfile::tempdir().unwrap();
        report.write_csvs(dir.path()).unwrap();
        let entropy = fs::read_to_string(dir.path().join("entropy.csv")).unwrap();
        assert!(entropy.starts_with("length,layer,head,entropy\n"));
        assert_eq!(entropy.lines().count(), 1 + doubling_lengths(20).len() * 4);
        assert!(fs::read_to_string(dir.path().join("pca.csv"))
            .unwrap()
            .starts_with("position,pc1,pc2"));
    }

    #[test]
    fn doubling() {
        assert_eq!(doubling_lengths(20), vec![1, 2, 4, 8, 16, 20]);
        assert_eq!(doubling_lengths(16), vec![1, 2, 4, 8, 16]);
    }
}

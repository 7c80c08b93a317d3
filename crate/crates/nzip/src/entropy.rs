//! Quantization, the conditional Gaussian integer PMF, differentiable rate
//! estimates, and quantized CDF tables for the range coder.
//!
//! The coding distribution of an integer ẑ under (μ, σ) is the Gaussian mass
//! on [ẑ−½, ẑ+½]:
//!
//!   p(ẑ) = Φ((ẑ+½−μ)/σ) − Φ((ẑ−½−μ)/σ)
//!
//! which is the Gaussian density convolved with unit uniform noise, evaluated
//! at ẑ. Training adds U(−½,½) noise instead of rounding so the same
//! expression stays differentiable.

use nzip_tensor::Tensor;
use rand::Rng;

use crate::error::{NzipError, Result};

/// Scale floor applied to every σ the model produces.
pub const SIGMA_MIN: f64 = 0.05;
/// CDF table precision: counts sum to 2^16.
pub const DEFAULT_PRECISION: u32 = 16;
/// Model mass allowed to fall outside a table window.
pub const DEFAULT_TAIL_MASS: f64 = 1.0 / 65536.0;
/// Half-width cap of a table window.
pub const MAX_HALF_WINDOW: i64 = 64;

/// Probabilities are floored at 2^-50 inside the rate so the loss stays
/// finite when a latent strays far from its predicted mean, and capped one
/// ulp below 1 so the rate stays strictly positive even where erf saturates.
const RATE_PMF_FLOOR: f64 = 8.881784197001252e-16;
const RATE_PMF_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Per-element Gaussian parameters of the entropy model, shaped like the
/// latent they describe.
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl GaussianParams {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<GaussianParams> {
        if mu.shape() != sigma.shape() {
            return Err(NzipError::Dimension(format!(
                "mu {:?} and sigma {:?} must have identical shape",
                mu.shape(),
                sigma.shape()
            )));
        }
        if sigma.data().iter().any(|&s| s < SIGMA_MIN - 1e-12) {
            return Err(NzipError::Parameter(format!("sigma below floor {SIGMA_MIN}")));
        }
        Ok(GaussianParams { mu, sigma })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }
}

/// Integer latent plus its shape, the object that is entropy-coded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub values: Vec<i32>,
    pub shape: Vec<usize>,
}

impl QuantizedLatent {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.values.iter().map(|&v| v as f64).collect(), &self.shape).unwrap()
    }
}

/// Training-time quantization surrogate: z + u with u ~ U(−½, ½) i.i.d.
/// The noise is a constant, so gradients pass through unchanged.
pub fn quantize_noise(z: &Tensor, rng: &mut impl Rng) -> Tensor {
    let noise: Vec<f64> = (0..z.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let u = Tensor::constant(noise, z.shape()).unwrap();
    z.add(&u).expect("same shape")
}

/// Inference-time quantization: round to nearest, halves away from zero.
pub fn quantize_round(z: &Tensor) -> Result<QuantizedLatent> {
    let mut values = Vec::with_capacity(z.numel());
    for &v in z.data() {
        let r = v.round();
        if !(i32::MIN as f64..=i32::MAX as f64).contains(&r) {
            return Err(NzipError::Range(format!("latent value {v} exceeds 32-bit integers")));
        }
        values.push(r as i32);
    }
    Ok(QuantizedLatent { values, shape: z.shape().to_vec() })
}

/// Gaussian CDF at x under (mu, sigma).
pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf((x - mu) / (sigma * SQRT_2)))
}

fn normal_pdf_std(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Probability of integer `zhat` under the noise-convolved Gaussian.
pub fn pmf(zhat: i64, mu: f64, sigma: f64) -> f64 {
    let z = zhat as f64;
    normal_cdf(z + 0.5, mu, sigma) - normal_cdf(z - 0.5, mu, sigma)
}

/// Σ_i −log₂ p(v_i; μ_i, σ_i) as a differentiable scalar. `values` may be a
/// noisy training latent or an integer-valued constant.
pub fn rate_bits(values: &Tensor, params: &GaussianParams) -> Result<Tensor> {
    if values.shape() != params.shape() {
        return Err(NzipError::Dimension(format!(
            "rate input {:?} does not match params {:?}",
            values.shape(),
            params.shape()
        )));
    }
    let vd = values.data();
    let md = params.mu.data();
    let sd = params.sigma.data();
    let ln2 = std::f64::consts::LN_2;

    let mut total = 0.0;
    // raw (unclamped) pmf retained so the backward pass can skip clamped
    // elements
    let mut probs = vec![0.0; vd.len()];
    for i in 0..vd.len() {
        let p = normal_cdf(vd[i] + 0.5, md[i], sd[i]) - normal_cdf(vd[i] - 0.5, md[i], sd[i]);
        probs[i] = p;
        total -= p.clamp(RATE_PMF_FLOOR, RATE_PMF_CEIL).log2();
    }

    let vc = values.clone();
    let mu = params.mu.clone();
    let sigma = params.sigma.clone();
    Ok(Tensor::from_op(
        vec![total],
        &[1],
        &[values, &params.mu, &params.sigma],
        Box::new(move |go, sink| {
            let g = go[0];
            let vd = vc.data();
            let md = mu.data();
            let sd = sigma.data();
            let n = vd.len();
            let mut gv = vec![0.0; n];
            let mut gm = vec![0.0; n];
            let mut gs = vec![0.0; n];
            for i in 0..n {
                let p = probs[i];
                if p <= RATE_PMF_FLOOR || p >= RATE_PMF_CEIL {
                    continue; // clamped region has zero gradient
                }
                let a = (vd[i] + 0.5 - md[i]) / sd[i];
                let b = (vd[i] - 0.5 - md[i]) / sd[i];
                let (pa, pb) = (normal_pdf_std(a), normal_pdf_std(b));
                // d(−log₂ p)/dθ = −(dp/dθ)/(p·ln2)
                let scale = -g / (p * ln2);
                let dp_dv = (pa - pb) / sd[i];
                gv[i] = scale * dp_dv;
                gm[i] = -scale * dp_dv;
                gs[i] = scale * (-(a * pa - b * pb) / sd[i]);
            }
            if let Some(dst) = sink.entry(&vc) {
                for (d, s) in dst.iter_mut().zip(&gv) {
                    *d += s;
                }
            }
            if let Some(dst) = sink.entry(&mu) {
                for (d, s) in dst.iter_mut().zip(&gm) {
                    *d += s;
                }
            }
            if let Some(dst) = sink.entry(&sigma) {
                for (d, s) in dst.iter_mut().zip(&gs) {
                    *d += s;
                }
            }
        }),
    ))
}

/// Learned per-channel prior for the hyper-latent: one (μ, log σ) pair per
/// channel, expanded over whatever shape the hyper-latent takes.
pub struct HyperPrior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl HyperPrior {
    pub fn new(channels: usize) -> HyperPrior {
        HyperPrior {
            mu: Tensor::leaf(vec![0.0; channels], &[channels]).unwrap(),
            log_sigma: Tensor::leaf(vec![0.0; channels], &[channels]).unwrap(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[0]
    }

    /// Broadcasts the per-channel parameters over an [N,C,H,W] latent shape.
    pub fn expand(&self, shape: &[usize]) -> Result<GaussianParams> {
        let c = self.channels();
        if shape.len() != 4 || shape[1] != c {
            return Err(NzipError::Dimension(format!(
                "hyper prior over {c} channels cannot describe {shape:?}"
            )));
        }
        let anchor = Tensor::zeros(shape);
        let mu = anchor.add(&self.mu.reshape(&[c, 1, 1])?)?;
        let sigma = anchor.add(&self.log_sigma.reshape(&[c, 1, 1])?)?.exp().clamp_min(SIGMA_MIN);
        GaussianParams::new(mu, sigma)
    }
}

/// Σ_i −log₂ p(w_i) under the learned channel prior.
pub fn hyper_rate_bits(w: &Tensor, prior: &HyperPrior) -> Result<Tensor> {
    rate_bits(w, &prior.expand(w.shape())?)
}

/// One element's integer alphabet: window start and cumulative counts,
/// cdf[0] = 0, cdf[K] = 2^precision, strictly increasing.
#[derive(Clone, Debug)]
pub struct ElementCdf {
    pub lo: i32,
    pub cdf: Vec<u32>,
}

impl ElementCdf {
    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn hi(&self) -> i32 {
        self.lo + (self.symbols() as i32 - 1)
    }
}

/// Per-element quantized coding distributions shared by encoder and decoder.
pub struct CdfTable {
    pub precision: u32,
    pub rows: Vec<ElementCdf>,
}

impl CdfTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Clamps each value into its element's window, returning the clamped
    /// values and how many needed clamping (a codec statistic).
    pub fn clamp_values(&self, values: &[i32]) -> Result<(Vec<i32>, usize)> {
        if values.len() != self.rows.len() {
            return Err(NzipError::Dimension(format!(
                "{} values against {} table rows",
                values.len(),
                self.rows.len()
            )));
        }
        let mut clamped = 0;
        let out = values
            .iter()
            .zip(&self.rows)
            .map(|(&v, row)| {
                let c = v.clamp(row.lo, row.hi());
                if c != v {
                    clamped += 1;
                }
                c
            })
            .collect();
        Ok((out, clamped))
    }

    /// Σ −log₂(count/2^P) at the given (already clamped) values: the exact
    /// information content the range coder is asked to store.
    pub fn table_bits(&self, values: &[i32]) -> Result<f64> {
        if values.len() != self.rows.len() {
            return Err(NzipError::Dimension("value/table length mismatch".into()));
        }
        let total = (1u64 << self.precision) as f64;
        let mut bits = 0.0;
        for (&v, row) in values.iter().zip(&self.rows) {
            if v < row.lo || v > row.hi() {
                return Err(NzipError::Contract(format!("value {v} outside window")));
            }
            let k = (v - row.lo) as usize;
            let count = (row.cdf[k + 1] - row.cdf[k]) as f64;
            bits -= (count / total).log2();
        }
        Ok(bits)
    }
}

/// Builds one quantized CDF row per element of `params`.
///
/// The window is [round(μ)−T, round(μ)+T] with T minimal such that the model
/// mass outside is below `tail_mass` (capped at MAX_HALF_WINDOW); leftover
/// tail mass is folded into the edge symbols; counts are integerized by
/// largest remainder with every symbol kept ≥ 1 and the total exactly 2^P.
pub fn build_cdf_tables(params: &GaussianParams, precision: u32, tail_mass: f64) -> Result<CdfTable> {
    if !(8..=24).contains(&precision) {
        return Err(NzipError::Range(format!("precision {precision} outside [8, 24]")));
    }
    if !(tail_mass > 0.0 && tail_mass < 1.0) {
        return Err(NzipError::Range("tail mass must lie in (0, 1)".into()));
    }
    let total = 1u64 << precision;
    let md = params.mu.data();
    let sd = params.sigma.data();

    let mut rows = Vec::with_capacity(md.len());
    let mut probs: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for i in 0..md.len() {
        let (mu, sigma) = (md[i], sd[i]);
        let center = mu.round();
        if center.abs() > (i32::MAX as f64) - (MAX_HALF_WINDOW as f64) {
            return Err(NzipError::Range(format!("mean {mu} exceeds the integer alphabet")));
        }
        let center = center as i64;
        let mut t = 0i64;
        while t < MAX_HALF_WINDOW {
            let inside = normal_cdf(center as f64 + t as f64 + 0.5, mu, sigma)
                - normal_cdf(center as f64 - t as f64 - 0.5, mu, sigma);
            if 1.0 - inside < tail_mass {
                break;
            }
            t += 1;
        }
        let lo = center - t;
        let hi = center + t;
        let k = (2 * t + 1) as usize;

        probs.clear();
        probs.reserve(k);
        for v in lo..=hi {
            probs.push(pmf(v, mu, sigma));
        }
        // fold the tails into the edges so the window mass is exactly 1
        probs[0] += normal_cdf(lo as f64 - 0.5, mu, sigma);
        probs[k - 1] += 1.0 - normal_cdf(hi as f64 + 0.5, mu, sigma);

        counts.clear();
        counts.reserve(k);
        let mut rem: Vec<(f64, usize)> = Vec::with_capacity(k);
        let mut sum = 0u64;
        for (j, &p) in probs.iter().enumerate() {
            let raw = p * total as f64;
            let floor = (raw.floor() as u64).clamp(1, total);
            counts.push(floor);
            sum += floor;
            rem.push((raw - raw.floor(), j));
        }
        if sum < total {
            // hand out the deficit by largest remainder, deterministic order
            rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut deficit = total - sum;
            let mut cursor = 0;
            while deficit > 0 {
                counts[rem[cursor % k].1] += 1;
                cursor += 1;
                deficit -= 1;
            }
        } else if sum > total {
            // overshoot can only come from the ≥1 clamps; take back from the
            // largest counts, which can spare it
            let mut excess = sum - total;
            while excess > 0 {
                let (j, _) = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("non-empty");
                debug_assert!(counts[j] > 1, "cannot reduce a unit count");
                counts[j] -= 1;
                excess -= 1;
            }
        }

        let mut cdf = Vec::with_capacity(k + 1);
        let mut acc = 0u64;
        cdf.push(0u32);
        for &cnt in counts.iter() {
            acc += cnt;
            cdf.push(acc as u32);
        }
        debug_assert_eq!(acc, total);
        rows.push(ElementCdf { lo: lo as i32, cdf });
    }
    Ok(CdfTable { precision, rows })
}

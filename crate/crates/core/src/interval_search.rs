//! Quantization-interval search.
//!
//! Candidates are clipping magnitudes `α`; a candidate's interval is
//! `Δ = α / q_max`. Each candidate is scored by the gradient-weighted
//! similarity between a full-precision reference output and the output
//! computed with the quantized tensor. The exhaustive search scores every
//! candidate; the ternary search narrows an index bracket assuming the
//! score is unimodal over the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, Tensor};
use crate::quantizer::{BitWidthSpec, Partition, QuantParams, Quantizer, TwinQuantParams};

/// Per-element sensitivity weights `g` for the similarity objective.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityWeights {
    Ones,
    Explicit(Tensor),
}

/// `−‖g ⊙ (y_fp − y_alpha)‖²`.
pub fn similarity(y_fp: &Tensor, y_alpha: &Tensor, w: &SimilarityWeights) -> Result<f64> {
    y_fp.same_shape(y_alpha, "similarity")?;
    let sum = match w {
        SimilarityWeights::Ones => y_fp
            .data()
            .iter()
            .zip(y_alpha.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>(),
        SimilarityWeights::Explicit(g) => {
            y_fp.same_shape(g, "similarity weights")?;
            y_fp.data()
                .iter()
                .zip(y_alpha.data())
                .zip(g.data())
                .map(|((a, b), g)| {
                    let e = g * (a - b);
                    e * e
                })
                .sum::<f64>()
        }
    };
    Ok(-sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridGeneration {
    Linear,
    Log,
}

/// Ascending candidate clipping magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub alphas: Vec<f64>,
    pub generation: GridGeneration,
    pub lo_frac: f64,
    pub hi_frac: f64,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Interval for candidate `i` under the given bit width.
    pub fn delta(&self, i: usize, bw: BitWidthSpec) -> f64 {
        self.alphas[i] / bw.q_max() as f64
    }
}

pub fn make_grid(
    x: &Tensor,
    n: usize,
    generation: GridGeneration,
    lo_frac: f64,
    hi_frac: f64,
) -> Result<CandidateGrid> {
    make_grid_for_max(x.max_abs(), n, generation, lo_frac, hi_frac)
}

pub fn make_grid_for_max(
    max_abs: f64,
    n: usize,
    generation: GridGeneration,
    lo_frac: f64,
    hi_frac: f64,
) -> Result<CandidateGrid> {
    if n < 3 {
        return Err(Error::param(format!("grid needs at least 3 candidates, got {n}")));
    }
    if !(lo_frac > 0.0 && lo_frac < hi_frac && hi_frac.is_finite()) {
        return Err(Error::param(format!(
            "grid bounds need 0 < lo_frac < hi_frac, got {lo_frac}, {hi_frac}"
        )));
    }
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot build an interval grid for a tensor with max |x| = {max_abs}"
        )));
    }
    let (lo, hi) = (lo_frac * max_abs, hi_frac * max_abs);
    let steps = (n - 1) as f64;
    let alphas: Vec<f64> = match generation {
        GridGeneration::Linear => (0..n).map(|i| lo + (hi - lo) * i as f64 / steps).collect(),
        GridGeneration::Log => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|i| (a + (b - a) * i as f64 / steps).exp()).collect()
        }
    };
    if !alphas.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::param("grid collapsed: candidates are not strictly ascending"));
    }
    Ok(CandidateGrid {
        alphas,
        generation,
        lo_frac,
        hi_frac,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Exhaustive,
    Ternary,
}

impl std::str::FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(SearchMethod::Exhaustive),
            "ternary" => Ok(SearchMethod::Ternary),
            other => Err(Error::param(format!("unknown search method `{other}`"))),
        }
    }
}

/// Every similarity evaluation made by one search, in call order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub evaluations: Vec<(usize, f64)>,
    pub chosen_index: usize,
    pub method: SearchMethod,
    pub converged: bool,
}

impl SearchTrace {
    pub fn eval_count(&self) -> usize {
        self.evaluations.len()
    }

    pub fn chosen_similarity(&self) -> f64 {
        self.evaluations
            .iter()
            .find(|(i, _)| *i == self.chosen_index)
            .map(|e| e.1)
            .expect("chosen index is always evaluated")
    }
}

/// Scores every candidate; ties go to the lowest index.
pub fn search_exhaustive<F>(mut eval: F, n: usize) -> Result<SearchTrace>
where
    F: FnMut(usize) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::param("search over an empty grid"));
    }
    let mut evaluations = Vec::with_capacity(n);
    for i in 0..n {
        evaluations.push((i, eval(i)?));
    }
    let chosen_index = argmax_first(&evaluations);
    Ok(SearchTrace {
        evaluations,
        chosen_index,
        method: SearchMethod::Exhaustive,
        converged: true,
    })
}

/// Ternary search over candidate indices `0..n`.
///
/// Shrinks `[L, R]` with interior points `m1 = L + ⌊(R−L)/3⌋`,
/// `m2 = R − ⌊(R−L)/3⌋` until `R − L ≤ eps_idx`, then scores the rest of
/// the bracket. Each index is evaluated at most once.
pub fn search_ternary<F>(mut eval: F, n: usize, eps_idx: usize) -> Result<SearchTrace>
where
    F: FnMut(usize) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::param("search over an empty grid"));
    }
    if eps_idx < 2 {
        return Err(Error::param(format!("eps_idx must be >= 2, got {eps_idx}")));
    }
    let mut memo: Vec<Option<f64>> = vec![None; n];
    let mut evaluations = Vec::new();
    let mut score = |i: usize, evaluations: &mut Vec<(usize, f64)>| -> Result<f64> {
        if let Some(v) = memo[i] {
            return Ok(v);
        }
        let v = eval(i)?;
        memo[i] = Some(v);
        evaluations.push((i, v));
        Ok(v)
    };

    let (mut lo, mut hi) = (0usize, n - 1);
    while hi - lo > eps_idx {
        let third = (hi - lo) / 3;
        let m1 = lo + third;
        let mut m2 = hi - third;
        if m1 == m2 {
            m2 = m1 + 1;
        }
        let (s1, s2) = (score(m1, &mut evaluations)?, score(m2, &mut evaluations)?);
        if s1 < s2 {
            lo = m1;
        } else {
            hi = m2;
        }
    }

    let mut best = (lo, f64::NEG_INFINITY);
    for i in lo..=hi {
        let s = score(i, &mut evaluations)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(SearchTrace {
        evaluations,
        chosen_index: best.0,
        method: SearchMethod::Ternary,
        converged: true,
    })
}

pub fn run_search<F>(method: SearchMethod, eval: F, n: usize, eps_idx: usize) -> Result<SearchTrace>
where
    F: FnMut(usize) -> Result<f64>,
{
    match method {
        SearchMethod::Exhaustive => search_exhaustive(eval, n),
        SearchMethod::Ternary => search_ternary(eval, n, eps_idx),
    }
}

/// Result of the continuous-bracket reading of the ternary search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTrace {
    pub evaluations: Vec<(f64, f64)>,
    pub chosen_alpha: f64,
    pub iterations: usize,
}

/// Ternary search over real `α ∈ [lo, hi]`, stopping when the bracket width
/// is at most `eps · hi`; returns the bracket midpoint.
pub fn search_ternary_continuous<F>(mut eval: F, lo: f64, hi: f64, eps: f64) -> Result<ContinuousTrace>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo > 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::param(format!("continuous bracket needs 0 < lo < hi, got [{lo}, {hi}]")));
    }
    if !(eps > 0.0) {
        return Err(Error::param(format!("continuous eps must be > 0, got {eps}")));
    }
    let stop = eps * hi;
    let (mut l, mut r) = (lo, hi);
    let mut evaluations = Vec::new();
    let mut iterations = 0;
    while r - l > stop {
        let third = (r - l) / 3.0;
        let (m1, m2) = (l + third, r - third);
        let s1 = eval(m1)?;
        let s2 = eval(m2)?;
        evaluations.push((m1, s1));
        evaluations.push((m2, s2));
        if s1 < s2 {
            l = m1;
        } else {
            r = m2;
        }
        iterations += 1;
    }
    let chosen_alpha = 0.5 * (l + r);
    evaluations.push((chosen_alpha, eval(chosen_alpha)?));
    Ok(ContinuousTrace {
        evaluations,
        chosen_alpha,
        iterations,
    })
}

fn argmax_first(evals: &[(usize, f64)]) -> usize {
    let mut best = evals[0];
    for &e in &evals[1..] {
        if e.1 > best.1 || (e.1 == best.1 && e.0 < best.0) {
            best = e;
        }
    }
    best.0
}

/// Strictly increasing then strictly decreasing (either part may be empty).
pub fn is_strictly_unimodal(values: &[f64]) -> bool {
    let mut i = 1;
    while i < values.len() && values[i] > values[i - 1] {
        i += 1;
    }
    while i < values.len() && values[i] < values[i - 1] {
        i += 1;
    }
    i >= values.len()
}

/// Upper bound on distinct evaluations made by [`search_ternary`].
pub fn ternary_eval_bound(n: usize, eps_idx: usize) -> usize {
    if n <= 1 {
        return n;
    }
    2 * (n as f64).log(1.5).ceil() as usize + eps_idx + 1
}

/// Search settings shared by every quantization point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub grid_n: usize,
    pub generation: GridGeneration,
    pub lo_frac: f64,
    pub hi_frac: f64,
    pub method: SearchMethod,
    pub eps_idx: usize,
    /// Alternating rounds for the two intervals of a twin quantizer.
    pub twin_rounds: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            grid_n: 100,
            generation: GridGeneration::Linear,
            lo_frac: 0.1,
            hi_frac: 1.2,
            method: SearchMethod::Ternary,
            eps_idx: 2,
            twin_rounds: 2,
        }
    }
}

/// One completed 1-D search, kept for reports and re-verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointTrace {
    pub label: String,
    pub grid: CandidateGrid,
    pub trace: SearchTrace,
}

impl PointTrace {
    pub fn chosen_alpha(&self) -> f64 {
        self.grid.alphas[self.trace.chosen_index]
    }
}

/// Quantizer family searched at one quantization point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QuantScheme {
    Uniform(BitWidthSpec),
    Twin(BitWidthSpec, Partition),
}

impl QuantScheme {
    pub fn bitwidth(&self) -> BitWidthSpec {
        match *self {
            QuantScheme::Uniform(bw) | QuantScheme::Twin(bw, _) => bw,
        }
    }
}

/// Searches the interval(s) of a quantizer for the values `x`, scoring each
/// candidate quantizer with `eval` (higher is better).
///
/// Uniform schemes run one search over a grid built from `max |x|`. Twin
/// schemes build one grid per region and alternate between the regions for
/// `cfg.twin_rounds` rounds, holding the other interval fixed; each region
/// starts at its no-clipping interval.
pub fn search_quantizer<F>(
    label: &str,
    x: &Tensor,
    scheme: QuantScheme,
    cfg: &SearchConfig,
    mut eval: F,
) -> Result<(Quantizer, Vec<PointTrace>)>
where
    F: FnMut(&Quantizer) -> Result<f64>,
{
    x.ensure_finite(label)?;
    match scheme {
        QuantScheme::Uniform(bw) => {
            let grid = make_grid(x, cfg.grid_n, cfg.generation, cfg.lo_frac, cfg.hi_frac)?;
            let score = |i: usize| eval(&Quantizer::Uniform(QuantParams::new(grid.delta(i, bw), bw)?));
            let trace = run_search(cfg.method, score, grid.len(), cfg.eps_idx)?;
            let q = Quantizer::Uniform(QuantParams::new(grid.delta(trace.chosen_index, bw), bw)?);
            Ok((
                q,
                vec![PointTrace {
                    label: label.to_string(),
                    grid,
                    trace,
                }],
            ))
        }
        QuantScheme::Twin(bw, partition) => {
            let q_max = bw.q_max() as f64;
            let region_max = |r1: bool| {
                x.data()
                    .iter()
                    .filter(|&&v| partition.in_r1(v) == r1)
                    .fold(0.0f64, |m, v| m.max(v.abs()))
            };
            let (max1, max2) = (region_max(true), region_max(false));
            if max1 == 0.0 && max2 == 0.0 {
                return Err(Error::DegenerateInput(format!("`{label}` is all zeros")));
            }
            let fallback = max1.max(max2) / q_max;
            let init = |m: f64| if m > 0.0 { m / q_max } else { fallback };
            let mut deltas = [init(max1), init(max2)];
            let region_grid = |m: f64| {
                (m > 0.0)
                    .then(|| make_grid_for_max(m, cfg.grid_n, cfg.generation, cfg.lo_frac, cfg.hi_frac))
                    .transpose()
            };
            let grids = [region_grid(max1)?, region_grid(max2)?];

            let mut traces = Vec::new();
            for round in 0..cfg.twin_rounds.max(1) {
                for region in 0..2 {
                    let Some(grid) = &grids[region] else { continue };
                    let score = |i: usize| -> Result<f64> {
                        let mut d = deltas;
                        d[region] = grid.delta(i, bw);
                        eval(&Quantizer::Twin(TwinQuantParams::new(d[0], d[1], bw, partition)?))
                    };
                    let trace = run_search(cfg.method, score, grid.len(), cfg.eps_idx)?;
                    deltas[region] = grid.delta(trace.chosen_index, bw);
                    traces.push(PointTrace {
                        label: format!("{label}.r{}.round{round}", region + 1),
                        grid: grid.clone(),
                        trace,
                    });
                }
            }
            let q = Quantizer::Twin(TwinQuantParams::new(deltas[0], deltas[1], bw, partition)?);
            Ok((q, traces))
        }
    }
}

/// Finds interval(s) for `x` maximizing the similarity between `target`
/// and `forward(quantize(x))`.
pub fn search_interval<F>(
    label: &str,
    x: &Tensor,
    scheme: QuantScheme,
    cfg: &SearchConfig,
    target: &Tensor,
    w: &SimilarityWeights,
    mut forward: F,
) -> Result<(Quantizer, Vec<PointTrace>)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    search_quantizer(label, x, scheme, cfg, |q| {
        let xq = q.apply(x)?;
        similarity(target, &forward(&xq)?, w)
    })
}

/// One or more linear maps `y_j = x · W_jᵀ + b_j` sharing an input; weights
/// are stored `[out × in]`.
#[derive(Debug, Clone)]
pub struct LinearUnit {
    pub name: String,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl LinearUnit {
    pub fn single(name: impl Into<String>, weight: Tensor, bias: Option<Vec<f64>>) -> Self {
        Self {
            name: name.into(),
            weights: vec![weight],
            biases: vec![bias],
        }
    }

    /// Outputs of every map concatenated along columns.
    pub fn forward_with(&self, x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
        let outs = weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| {
                let y = matmul_nt(x, w)?;
                match b {
                    Some(b) => y.add_row_vector(b),
                    None => Ok(y),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            Ok(outs.into_iter().next().unwrap())
        } else {
            Tensor::concat_cols(&outs)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &self.weights)
    }
}

/// Intervals chosen for one linear unit and its input.
#[derive(Debug, Clone)]
pub struct LayerCalibration {
    pub weights: Vec<QuantParams>,
    pub activation: Quantizer,
    pub traces: Vec<PointTrace>,
}

/// Similarity weights for one weight matrix's output slice, when the unit
/// has several maps and explicit weights cover the concatenated output.
fn slice_weights(w: &SimilarityWeights, start: usize, width: usize) -> Result<SimilarityWeights> {
    match w {
        SimilarityWeights::Ones => Ok(SimilarityWeights::Ones),
        SimilarityWeights::Explicit(g) => Ok(SimilarityWeights::Explicit(g.slice_cols(start, width)?)),
    }
}

/// Calibrates a linear unit against its local full-precision output:
/// every weight matrix first (input unquantized), then the input activation
/// with the chosen weight intervals in place.
pub fn calibrate_layer(
    unit: &LinearUnit,
    x_cal: &Tensor,
    w: &SimilarityWeights,
    weight_bits: BitWidthSpec,
    activation: QuantScheme,
    cfg: &SearchConfig,
) -> Result<LayerCalibration> {
    x_cal.dims2()?;
    let target = unit.forward(x_cal)?;
    if let SimilarityWeights::Explicit(g) = w {
        target.same_shape(g, "calibrate_layer weights")?;
    }

    let mut weight_params = Vec::with_capacity(unit.weights.len());
    let mut qweights = Vec::with_capacity(unit.weights.len());
    let mut traces = Vec::new();
    let mut col = 0;
    for (j, wt) in unit.weights.iter().enumerate() {
        let width = wt.rows();
        let sub = LinearUnit::single("", wt.clone(), unit.biases[j].clone());
        let sub_target = sub.forward(x_cal)?;
        let sub_w = slice_weights(w, col, width)?;
        let label = if unit.weights.len() == 1 {
            format!("{}.weight", unit.name)
        } else {
            format!("{}.weight{j}", unit.name)
        };
        let (q, trace) = search_interval(
            &label,
            wt,
            QuantScheme::Uniform(weight_bits),
            cfg,
            &sub_target,
            &sub_w,
            |wq| sub.forward_with(x_cal, std::slice::from_ref(wq)),
        )?;
        qweights.push(q.apply(wt)?);
        let Quantizer::Uniform(p) = q else { unreachable!("uniform scheme") };
        weight_params.push(p);
        traces.extend(trace);
        col += width;
    }

    let act_label = format!("{}.input", unit.name);
    let forward = |xq: &Tensor| unit.forward_with(xq, &qweights);
    let (activation, act_traces) = search_interval(&act_label, x_cal, activation, cfg, &target, w, forward)?;
    traces.extend(act_traces);
    Ok(LayerCalibration {
        weights: weight_params,
        activation,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn from_values(values: &[f64]) -> impl FnMut(usize) -> Result<f64> + '_ {
        move |i| Ok(values[i])
    }

    #[test]
    fn similarity_examples() {
        let y = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(similarity(&y, &y, &SimilarityWeights::Ones).unwrap(), 0.0);
        let ya = Tensor::from_vec(vec![0.0, 2.0]);
        let g = SimilarityWeights::Explicit(Tensor::from_vec(vec![2.0, 1.0]));
        assert_eq!(similarity(&y, &ya, &g).unwrap(), -4.0);
        let yb = Tensor::from_vec(vec![0.5, 4.0]);
        assert_eq!(similarity(&y, &yb, &SimilarityWeights::Ones).unwrap(), -(0.25 + 4.0));
        assert!(similarity(&y, &Tensor::from_vec(vec![1.0]), &SimilarityWeights::Ones).is_err());
    }

    #[test]
    fn grid_examples() {
        let x = Tensor::from_vec(vec![-2.0, 1.0]);
        let g = make_grid(&x, 3, GridGeneration::Linear, 0.5, 1.0).unwrap();
        assert_eq!(g.alphas, vec![1.0, 1.5, 2.0]);
        assert!(make_grid(&x, 3, GridGeneration::Linear, 1.0, 0.5).is_err());
        assert!(make_grid(&x, 2, GridGeneration::Linear, 0.1, 0.5).is_err());
        assert!(matches!(
            make_grid(&Tensor::zeros(&[4]), 5, GridGeneration::Linear, 0.1, 1.2),
            Err(Error::DegenerateInput(_))
        ));
        let lg = make_grid(&x, 50, GridGeneration::Log, 0.01, 1.2).unwrap();
        assert!(lg.alphas.windows(2).all(|w| w[0] < w[1]));
        assert!((lg.alphas[0] - 0.02).abs() < 1e-12 && (lg.alphas[49] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_examples() {
        assert_eq!(search_exhaustive(from_values(&[1.0; 5]), 5).unwrap().chosen_index, 0);
        let t = search_exhaustive(from_values(&[-3.0, -1.0, -2.0]), 3).unwrap();
        assert_eq!(t.chosen_index, 1);
        assert_eq!(t.eval_count(), 3);
    }

    #[test]
    fn ternary_monotone_and_small() {
        let inc: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(search_ternary(from_values(&inc), 50, 2).unwrap().chosen_index, 49);
        let dec: Vec<f64> = inc.iter().map(|v| -v).collect();
        assert_eq!(search_ternary(from_values(&dec), 50, 2).unwrap().chosen_index, 0);
        assert_eq!(search_ternary(from_values(&[5.0]), 1, 2).unwrap().chosen_index, 0);
        assert_eq!(search_ternary(from_values(&[1.0, 2.0]), 2, 2).unwrap().chosen_index, 1);
        assert!(search_ternary(from_values(&[1.0]), 1, 1).is_err());
    }

    #[test]
    fn ternary_memoizes() {
        let values: Vec<f64> = (0..100).map(|i| -((i as f64) - 37.0).powi(2)).collect();
        let mut calls = vec![0usize; 100];
        let t = search_ternary(
            |i| {
                calls[i] += 1;
                Ok(values[i])
            },
            100,
            2,
        )
        .unwrap();
        assert_eq!(t.chosen_index, 37);
        assert!(calls.iter().all(|&c| c <= 1));
        assert_eq!(calls.iter().sum::<usize>(), t.eval_count());
        assert!(t.eval_count() <= 26, "{} evaluations", t.eval_count());
    }

    #[test]
    fn ternary_propagates_errors() {
        let r = search_ternary(|_| Err(Error::param("boom")), 10, 2);
        assert!(r.is_err());
    }

    #[test]
    fn continuous_reading_finds_peak() {
        let t = search_ternary_continuous(|a| Ok(-(a - 0.37).powi(2)), 0.1, 1.2, 1e-4).unwrap();
        assert!((t.chosen_alpha - 0.37).abs() <= 1.2e-4);
    }

    #[test]
    fn unimodality_check() {
        assert!(is_strictly_unimodal(&[1.0, 2.0, 3.0, 2.0]));
        assert!(is_strictly_unimodal(&[3.0, 2.0]));
        assert!(!is_strictly_unimodal(&[1.0, 1.0]));
        assert!(!is_strictly_unimodal(&[1.0, 3.0, 2.0, 4.0]));
    }

    #[test]
    fn twin_search_improves_on_init() {
        let mut rng = Rng::seeded(11);
        let x = rng.normal(&[64, 8], 0.0, 1.0).map(|v| if v < 0.0 { 0.1 * v } else { v });
        let bw = BitWidthSpec::signed(4).unwrap();
        let cfg = SearchConfig::default();
        let scheme = QuantScheme::Twin(bw, Partition::BySign);
        let (q, traces) =
            search_interval("t", &x, scheme, &cfg, &x, &SimilarityWeights::Ones, |xq| Ok(xq.clone())).unwrap();
        assert_eq!(traces.len(), 4);
        let d = q.deltas();
        assert!(d[0] < d[1]);
        let init = Quantizer::Twin(
            TwinQuantParams::new(x.map(|v| v.min(0.0)).max_abs() / 7.0, x.max_abs() / 7.0, bw, Partition::BySign)
                .unwrap(),
        );
        let sim = |q: &Quantizer| similarity(&x, &q.apply(&x).unwrap(), &SimilarityWeights::Ones).unwrap();
        assert!(sim(&q) >= sim(&init));
    }

    #[test]
    fn calibrate_layer_methods_agree_on_unimodal_landscape() {
        let mut rng = Rng::seeded(3);
        let unit = LinearUnit::single("fc", rng.normal(&[6, 8], 0.0, 0.4), Some(vec![0.1; 6]));
        let x = rng.normal(&[40, 8], 0.0, 1.0);
        let bw = BitWidthSpec::signed(4).unwrap();
        let act = QuantScheme::Uniform(BitWidthSpec::signed(8).unwrap());
        let mut cfg = SearchConfig::default();
        let ex = {
            cfg.method = SearchMethod::Exhaustive;
            calibrate_layer(&unit, &x, &SimilarityWeights::Ones, bw, act, &cfg).unwrap()
        };
        let te = {
            cfg.method = SearchMethod::Ternary;
            calibrate_layer(&unit, &x, &SimilarityWeights::Ones, bw, act, &cfg).unwrap()
        };
        let w_landscape: Vec<f64> = ex.traces[0].trace.evaluations.iter().map(|e| e.1).collect();
        if is_strictly_unimodal(&w_landscape) {
            assert_eq!(ex.weights[0], te.weights[0]);
        }
        assert_eq!(ex.traces[0].trace.eval_count(), 100);
        assert!(te.traces[0].trace.eval_count() <= 26);

        let zero = LinearUnit::single("z", Tensor::zeros(&[2, 8]), None);
        assert!(matches!(
            calibrate_layer(&zero, &x, &SimilarityWeights::Ones, bw, act, &cfg),
            Err(Error::DegenerateInput(_))
        ));
    }
}

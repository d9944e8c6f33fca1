use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backward::{backward_wrt_activations, SubmoduleGrads};
use super::forward::{QuantPoint, SubmoduleQuant, SubmoduleTaps};
use super::{SubmoduleKind, ToyNet, ToyNetConfig};
use crate::calibration::{build_calibration_set, CalibrationPool, SelectionResult};
use crate::compensation::{adapter_param_bytes, apply_adapter, fit_adapter, Adapter, FitOptions, TreConfig};
use crate::error::{Error, Result};
use crate::interval_search::{
    calibrate_layer, search_interval, search_quantizer, similarity, LinearUnit, PointTrace, QuantScheme, SearchConfig,
    SimilarityWeights,
};
use crate::numerics::{matmul, mse, Rng, Tensor};
use crate::quantizer::{BitWidthSpec, Partition, Quantizer};

/// What a candidate interval is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityScope {
    /// Output of the linear unit (or attention product) the point feeds.
    Local,
    /// Final network output, with the rest of the network at full precision.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub search: SearchConfig,
    pub scope: SimilarityScope,
    /// Weight the similarity by full-precision loss gradients (local scope only).
    pub gradient_weighted: bool,
    pub n_target: usize,
    pub selection_seed: u64,
    pub tre: TreConfig,
    pub fit: FitOptions,
    pub compensate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 8,
            search: SearchConfig::default(),
            scope: SimilarityScope::Local,
            gradient_weighted: false,
            n_target: 8,
            selection_seed: 0,
            tre: TreConfig::default(),
            fit: FitOptions::default(),
            compensate: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        BitWidthSpec::signed(self.weight_bits)?;
        BitWidthSpec::signed(self.act_bits)?;
        self.tre.validate()?;
        if self.search.grid_n == 0 {
            return Err(Error::param("grid size must be positive"));
        }
        if self.gradient_weighted && self.scope == SimilarityScope::Network {
            return Err(Error::param("gradient weighting applies to the local similarity scope only"));
        }
        Ok(())
    }

    /// Quantizer family used at each point.
    pub fn scheme(&self, point: QuantPoint, seq_len: usize) -> Result<QuantScheme> {
        let a = BitWidthSpec::signed(self.act_bits)?;
        Ok(match point {
            p if p.is_weight() => QuantScheme::Uniform(BitWidthSpec::signed(self.weight_bits)?),
            QuantPoint::Probs => QuantScheme::Twin(
                BitWidthSpec::unsigned(self.act_bits)?,
                Partition::ByThreshold(1.0 / seq_len as f64),
            ),
            QuantPoint::Hidden => QuantScheme::Twin(a, Partition::BySign),
            _ => QuantScheme::Uniform(a),
        })
    }
}

/// A search trace tagged with the point it calibrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracedPoint {
    pub point: QuantPoint,
    pub trace: PointTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub index: usize,
    pub name: String,
    pub kind: SubmoduleKind,
    /// Output MSE against the full-precision stream on the calibration batch, after compensation.
    pub accumulated_mse: f64,
    pub mse_before_compensation: f64,
    pub tre: f64,
    pub adapter_active: bool,
    pub adapter_bytes: usize,
    pub deltas: BTreeMap<QuantPoint, Vec<f64>>,
    pub evaluations: usize,
    pub traces: Vec<TracedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTotals {
    pub evaluations: usize,
    pub adapter_bytes: usize,
    pub active_adapters: usize,
    /// Informative only; not reproducible.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub calibration_ids: Vec<String>,
    pub selection: Option<SelectionResult>,
    pub modules: Vec<ModuleReport>,
    pub totals: PipelineTotals,
}

/// Full-precision net plus per-submodule quantizers and adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedToyNet {
    pub net: ToyNet,
    pub quant: Vec<SubmoduleQuant>,
    pub adapters: Vec<Adapter>,
}

impl QuantizedToyNet {
    /// Quantized submodule `m` followed by its adapter.
    pub fn run_submodule(&self, m: usize, x: &Tensor) -> Result<Tensor> {
        let y = self.net.run_submodule(m, x, Some(&self.quant[m]), None)?.into_output();
        match self.adapters.get(m) {
            Some(a) => apply_adapter(a, x, &y),
            None => Ok(y),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for m in 0..self.net.n_submodules() {
            h = self.run_submodule(m, &h)?;
        }
        Ok(h)
    }

    pub fn regate(&mut self, tau: f64) -> Result<()> {
        self.adapters.iter_mut().try_for_each(|a| a.regate(tau))
    }

    pub fn active_adapters(&self) -> usize {
        self.adapters.iter().filter(|a| a.active).count()
    }

    pub fn adapter_bytes(&self) -> usize {
        self.adapters.iter().map(adapter_param_bytes).sum()
    }

    /// Active adapter count and bytes if every adapter were re-gated at
    /// `tau`. Adapters whose fit was skipped count as inactive.
    pub fn gate_summary(&self, tau: f64) -> (usize, usize) {
        let mut count = 0;
        let mut bytes = 0;
        for a in self.adapters.iter().filter(|a| a.fitted && a.tre_at_fit > tau) {
            let mut on = a.clone();
            on.active = true;
            count += 1;
            bytes += adapter_param_bytes(&on);
        }
        (count, bytes)
    }
}

/// Calibration-batch tensors seen by one submodule's adapter fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleIo {
    /// Quantized-path input, samples stacked by rows.
    pub x: Tensor,
    /// Full-precision stream output.
    pub y: Tensor,
    /// Quantized output before compensation.
    pub y_q: Tensor,
}

impl QuantizedToyNet {
    /// Replays the pipeline's per-submodule fitting data for `samples`.
    pub fn calibration_io(&self, samples: &[Tensor]) -> Result<Vec<ModuleIo>> {
        let mut fp = samples.to_vec();
        let mut qs = samples.to_vec();
        let mut out = Vec::with_capacity(self.net.n_submodules());
        for m in 0..self.net.n_submodules() {
            let fp_out = fp
                .iter()
                .map(|x| Ok(self.net.run_submodule(m, x, None, None)?.into_output()))
                .collect::<Result<Vec<_>>>()?;
            let q_out = qs
                .iter()
                .map(|x| Ok(self.net.run_submodule(m, x, Some(&self.quant[m]), None)?.into_output()))
                .collect::<Result<Vec<_>>>()?;
            let next = qs
                .iter()
                .zip(&q_out)
                .map(|(x, y)| apply_adapter(&self.adapters[m], x, y))
                .collect::<Result<Vec<_>>>()?;
            out.push(ModuleIo {
                x: Tensor::concat_rows(&qs)?,
                y: Tensor::concat_rows(&fp_out)?,
                y_q: Tensor::concat_rows(&q_out)?,
            });
            fp = fp_out;
            qs = next;
        }
        Ok(out)
    }
}

/// A network whose per-submodule outputs can be compared.
pub trait ModuleOutputs {
    fn net_config(&self) -> &ToyNetConfig;
    fn module_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

impl ModuleOutputs for ToyNet {
    fn net_config(&self) -> &ToyNetConfig {
        &self.config
    }

    fn module_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.submodule_outputs(x)
    }
}

impl ModuleOutputs for QuantizedToyNet {
    fn net_config(&self) -> &ToyNetConfig {
        &self.net.config
    }

    fn module_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut outs = Vec::with_capacity(self.net.n_submodules());
        for m in 0..self.net.n_submodules() {
            h = self.run_submodule(m, &h)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

/// Per-submodule output MSE between two nets, averaged over `probe` inputs,
/// in forward order.
pub fn measure_accumulated_error(fp: &dyn ModuleOutputs, q: &dyn ModuleOutputs, probe: &[Tensor]) -> Result<Vec<f64>> {
    let (a, b) = (fp.net_config(), q.net_config());
    if (a.depth, a.d_model, a.n_heads, a.d_ff, a.seq_len) != (b.depth, b.d_model, b.n_heads, b.d_ff, b.seq_len) {
        return Err(Error::param("networks have different architectures"));
    }
    if probe.is_empty() {
        return Err(Error::param("empty probe set"));
    }
    let mut curve = vec![0.0; a.n_submodules()];
    for x in probe {
        let (ya, yb) = (fp.module_outputs(x)?, q.module_outputs(x)?);
        for (c, (u, v)) in curve.iter_mut().zip(ya.iter().zip(&yb)) {
            *c += mse(u, v)?;
        }
    }
    curve.iter_mut().for_each(|c| *c /= probe.len() as f64);
    Ok(curve)
}

/// Random stream used for calibration-set selection under `seed`.
pub fn selection_rng(seed: u64) -> Rng {
    Rng::derive(seed, "calibration.selection")
}

/// Selects a calibration set from `pool`, then quantizes and compensates `net`.
pub fn run_taptq_pipeline(
    net: &ToyNet,
    pool: &CalibrationPool,
    cfg: &PipelineConfig,
) -> Result<(QuantizedToyNet, PipelineReport)> {
    if pool.is_empty() {
        return Err(Error::param("empty calibration pool"));
    }
    let mut rng = selection_rng(cfg.selection_seed);
    let selection = build_calibration_set(pool, cfg.n_target, &mut rng)?;
    let samples: Vec<(String, Tensor)> = selection
        .selected_ids
        .iter()
        .map(|id| {
            let s = pool.get(id).expect("selected ids come from the pool");
            (id.clone(), s.payload.clone())
        })
        .collect();
    let (qnet, mut report) = run_pipeline_on(net, &samples, cfg)?;
    report.selection = Some(selection);
    Ok((qnet, report))
}

/// Quantizes and compensates `net` using the given calibration inputs.
pub fn run_pipeline_on(
    net: &ToyNet,
    samples: &[(String, Tensor)],
    cfg: &PipelineConfig,
) -> Result<(QuantizedToyNet, PipelineReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::param("no calibration samples"));
    }
    for (id, x) in samples {
        net.check_input(x)?;
        x.ensure_finite(id)?;
    }
    let start = Instant::now();
    let n_mod = net.n_submodules();
    let grads = if cfg.gradient_weighted {
        Some(
            samples
                .iter()
                .map(|(_, x)| backward_wrt_activations(net, x, None))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let mut fp: Vec<Tensor> = samples.iter().map(|(_, x)| x.clone()).collect();
    let mut qs = fp.clone();
    let mut quant = Vec::with_capacity(n_mod);
    let mut adapters = Vec::with_capacity(n_mod);
    let mut modules = Vec::with_capacity(n_mod);

    for m in 0..n_mod {
        let ctx = ModuleCtx {
            net,
            m,
            cfg,
            inputs: &qs,
            grads: grads.as_ref().map(|g| g.iter().map(|s| &s[m]).collect()),
        };
        let (sq, traces) = match cfg.scope {
            SimilarityScope::Local => ctx.calibrate_local()?,
            SimilarityScope::Network => ctx.calibrate_network()?,
        };

        let fp_out = fp
            .iter()
            .map(|x| Ok(net.run_submodule(m, x, None, None)?.into_output()))
            .collect::<Result<Vec<_>>>()?;
        let q_out = qs
            .iter()
            .map(|x| Ok(net.run_submodule(m, x, Some(&sq), None)?.into_output()))
            .collect::<Result<Vec<_>>>()?;
        let (x_cat, y_cat, yq_cat) = (
            Tensor::concat_rows(&qs)?,
            Tensor::concat_rows(&fp_out)?,
            Tensor::concat_rows(&q_out)?,
        );
        let d = net.config.d_model;
        let adapter = if cfg.compensate {
            fit_adapter(&x_cat, &y_cat, &yq_cat, samples.len(), &cfg.fit, &cfg.tre)?
        } else {
            let score = crate::compensation::tre_batch(&y_cat, &yq_cat, samples.len(), &cfg.tre)?;
            Adapter::inactive(d, d, cfg.fit.rank.min(d), score)
        };
        let compensated = qs
            .iter()
            .zip(&q_out)
            .map(|(x, y)| apply_adapter(&adapter, x, y))
            .collect::<Result<Vec<_>>>()?;

        let mut deltas = BTreeMap::new();
        for (p, q) in &sq.points {
            deltas.insert(*p, q.deltas());
        }
        modules.push(ModuleReport {
            index: m,
            name: ToyNet::submodule_name(m),
            kind: ToyNet::submodule_kind(m),
            accumulated_mse: mse(&y_cat, &Tensor::concat_rows(&compensated)?)?,
            mse_before_compensation: mse(&y_cat, &yq_cat)?,
            tre: adapter.tre_at_fit,
            adapter_active: adapter.active,
            adapter_bytes: adapter_param_bytes(&adapter),
            deltas,
            evaluations: traces.iter().map(|t| t.trace.trace.eval_count()).sum(),
            traces,
        });
        fp = fp_out;
        qs = compensated;
        quant.push(sq);
        adapters.push(adapter);
    }

    let qnet = QuantizedToyNet {
        net: net.clone(),
        quant,
        adapters,
    };
    let totals = PipelineTotals {
        evaluations: modules.iter().map(|m| m.evaluations).sum(),
        adapter_bytes: qnet.adapter_bytes(),
        active_adapters: qnet.active_adapters(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let report = PipelineReport {
        config: cfg.clone(),
        calibration_ids: samples.iter().map(|(id, _)| id.clone()).collect(),
        selection: None,
        modules,
        totals,
    };
    Ok((qnet, report))
}

/// State for calibrating one submodule.
struct ModuleCtx<'a> {
    net: &'a ToyNet,
    m: usize,
    cfg: &'a PipelineConfig,
    /// Submodule inputs on the quantized path, one per sample.
    inputs: &'a [Tensor],
    grads: Option<Vec<&'a SubmoduleGrads>>,
}

impl ModuleCtx<'_> {
    fn run(&self, quant: &SubmoduleQuant) -> Result<Vec<SubmoduleTaps>> {
        self.inputs
            .iter()
            .map(|x| self.net.run_submodule(self.m, x, Some(quant), None))
            .collect()
    }

    fn label(&self, unit: &str) -> String {
        format!("{}.{unit}", ToyNet::submodule_name(self.m))
    }

    fn weights(&self, pick: impl Fn(&SubmoduleGrads) -> Result<Tensor>) -> Result<SimilarityWeights> {
        match &self.grads {
            None => Ok(SimilarityWeights::Ones),
            Some(gs) => {
                let parts = gs.iter().map(|g| pick(g)).collect::<Result<Vec<_>>>()?;
                Ok(SimilarityWeights::Explicit(Tensor::concat_rows(&parts)?.map(f64::abs)))
            }
        }
    }

    /// Calibrates a linear unit and records its points in `quant`.
    fn unit(
        &self,
        quant: &mut SubmoduleQuant,
        traces: &mut Vec<TracedPoint>,
        unit: LinearUnit,
        weight_points: &[QuantPoint],
        input: Tensor,
        act_point: QuantPoint,
        w: SimilarityWeights,
    ) -> Result<()> {
        let seq = self.net.config.seq_len;
        let cal = calibrate_layer(
            &unit,
            &input,
            &w,
            BitWidthSpec::signed(self.cfg.weight_bits)?,
            self.cfg.scheme(act_point, seq)?,
            &self.cfg.search,
        )?;
        for (p, params) in weight_points.iter().zip(&cal.weights) {
            quant.points.insert(*p, Quantizer::Uniform(*params));
        }
        quant.points.insert(act_point, cal.activation);
        for (i, trace) in cal.traces.into_iter().enumerate() {
            let point = weight_points.get(i).copied().unwrap_or(act_point);
            traces.push(TracedPoint { point, trace });
        }
        Ok(())
    }

    fn calibrate_local(&self) -> Result<(SubmoduleQuant, Vec<TracedPoint>)> {
        let block = &self.net.blocks[self.m / 2];
        let mut quant = SubmoduleQuant::default();
        let mut traces = Vec::new();
        let stack = |taps: &[SubmoduleTaps], f: &dyn Fn(&SubmoduleTaps) -> Tensor| {
            Tensor::concat_rows(&taps.iter().map(f).collect::<Vec<_>>())
        };

        match ToyNet::submodule_kind(self.m) {
            SubmoduleKind::Attention => {
                let taps = self.run(&quant)?;
                let unit = LinearUnit {
                    name: self.label("qkv"),
                    weights: vec![block.wq.clone(), block.wk.clone(), block.wv.clone()],
                    biases: vec![None, None, None],
                };
                let w = self.weights(|g| match g {
                    SubmoduleGrads::Attention(a) => Tensor::concat_cols(&[a.q.clone(), a.k.clone(), a.v.clone()]),
                    _ => unreachable!(),
                })?;
                let normed = stack(&taps, &|t| t.normed().clone())?;
                let points = [QuantPoint::Wq, QuantPoint::Wk, QuantPoint::Wv];
                self.unit(&mut quant, &mut traces, unit, &points, normed, QuantPoint::AttnIn, w)?;

                let taps = self.run(&quant)?;
                let dh = self.net.config.d_head();
                let mut probs = Vec::new();
                let mut values = Vec::new();
                for t in &taps {
                    let SubmoduleTaps::Attention(a) = t else { unreachable!() };
                    for (h, p) in a.probs.iter().enumerate() {
                        probs.push(p.clone());
                        values.push(a.v.slice_cols(h * dh, dh)?);
                    }
                }
                let seq = self.net.config.seq_len;
                let product = |p: &Tensor| -> Result<Tensor> {
                    let parts = values
                        .iter()
                        .enumerate()
                        .map(|(i, v)| matmul(&p.slice_rows(i * seq, seq)?, v))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::concat_rows(&parts)
                };
                let probs = Tensor::concat_rows(&probs)?;
                let target = product(&probs)?;
                let heads = self.net.config.n_heads;
                let w = self.weights(|g| {
                    let SubmoduleGrads::Attention(a) = g else { unreachable!() };
                    Tensor::concat_rows(&(0..heads).map(|h| a.ctx.slice_cols(h * dh, dh)).collect::<Result<Vec<_>>>()?)
                })?;
                let (q, ts) = search_interval(
                    &self.label("probs"),
                    &probs,
                    self.cfg.scheme(QuantPoint::Probs, seq)?,
                    &self.cfg.search,
                    &target,
                    &w,
                    product,
                )?;
                quant.points.insert(QuantPoint::Probs, q);
                traces.extend(ts.into_iter().map(|trace| TracedPoint {
                    point: QuantPoint::Probs,
                    trace,
                }));

                let taps = self.run(&quant)?;
                let ctx = stack(&taps, &|t| match t {
                    SubmoduleTaps::Attention(a) => a.ctx.clone(),
                    _ => unreachable!(),
                })?;
                let w = self.weights(|g| Ok(g.branch().clone()))?;
                let unit = LinearUnit::single(self.label("o"), block.wo.clone(), None);
                self.unit(&mut quant, &mut traces, unit, &[QuantPoint::Wo], ctx, QuantPoint::Ctx, w)?;
            }
            SubmoduleKind::Mlp => {
                let taps = self.run(&quant)?;
                let normed = stack(&taps, &|t| t.normed().clone())?;
                let w = self.weights(|g| match g {
                    SubmoduleGrads::Mlp(p) => Ok(p.hidden_pre.clone()),
                    _ => unreachable!(),
                })?;
                let unit = LinearUnit::single(self.label("fc1"), block.w1.clone(), Some(block.b1.clone()));
                self.unit(&mut quant, &mut traces, unit, &[QuantPoint::W1], normed, QuantPoint::MlpIn, w)?;

                let taps = self.run(&quant)?;
                let hidden = stack(&taps, &|t| match t {
                    SubmoduleTaps::Mlp(p) => p.hidden.clone(),
                    _ => unreachable!(),
                })?;
                let w = self.weights(|g| Ok(g.branch().clone()))?;
                let unit = LinearUnit::single(self.label("fc2"), block.w2.clone(), Some(block.b2.clone()));
                self.unit(&mut quant, &mut traces, unit, &[QuantPoint::W2], hidden, QuantPoint::Hidden, w)?;
            }
        }
        Ok((quant, traces))
    }

    /// Scores every candidate by the similarity of the final network output,
    /// running the rest of the network at full precision.
    fn calibrate_network(&self) -> Result<(SubmoduleQuant, Vec<TracedPoint>)> {
        let block = &self.net.blocks[self.m / 2];
        let targets = self
            .inputs
            .iter()
            .map(|x| self.net.forward_from(self.m, x))
            .collect::<Result<Vec<_>>>()?;
        let mut quant = SubmoduleQuant::default();
        let mut traces = Vec::new();
        let seq = self.net.config.seq_len;

        for &point in QuantPoint::calibration_order(ToyNet::submodule_kind(self.m)) {
            let data = match point {
                QuantPoint::Wq => block.wq.clone(),
                QuantPoint::Wk => block.wk.clone(),
                QuantPoint::Wv => block.wv.clone(),
                QuantPoint::Wo => block.wo.clone(),
                QuantPoint::W1 => block.w1.clone(),
                QuantPoint::W2 => block.w2.clone(),
                _ => {
                    let taps = self.run(&quant)?;
                    let parts: Vec<Tensor> = taps
                        .iter()
                        .map(|t| match (point, t) {
                            (QuantPoint::AttnIn | QuantPoint::MlpIn, t) => Ok(t.normed().clone()),
                            (QuantPoint::Probs, SubmoduleTaps::Attention(a)) => Tensor::concat_rows(&a.probs),
                            (QuantPoint::Ctx, SubmoduleTaps::Attention(a)) => Ok(a.ctx.clone()),
                            (QuantPoint::Hidden, SubmoduleTaps::Mlp(p)) => Ok(p.hidden.clone()),
                            _ => unreachable!("point matches submodule kind"),
                        })
                        .collect::<Result<_>>()?;
                    Tensor::concat_rows(&parts)?
                }
            };
            let label = format!("{}.{}", ToyNet::submodule_name(self.m), point.name());
            let (q, ts) = search_quantizer(&label, &data, self.cfg.scheme(point, seq)?, &self.cfg.search, |cand| {
                let mut trial = quant.clone();
                trial.points.insert(point, *cand);
                let mut total = 0.0;
                for (x, target) in self.inputs.iter().zip(&targets) {
                    let y = self.net.run_submodule(self.m, x, Some(&trial), None)?.into_output();
                    let out = self.net.forward_from(self.m + 1, &y)?;
                    total += similarity(target, &out, &SimilarityWeights::Ones)?;
                }
                Ok(total)
            })?;
            quant.points.insert(point, q);
            traces.extend(ts.into_iter().map(|trace| TracedPoint { point, trace }));
        }
        Ok((quant, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval_search::{is_strictly_unimodal, SearchMethod};
    use crate::toynet::{gen_calibration_pool, gen_probe_inputs};

    fn small() -> ToyNetConfig {
        ToyNetConfig {
            depth: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            seq_len: 8,
            outlier_channels: 2,
            outlier_scale: 8.0,
            seed: 3,
        }
    }

    fn samples(cfg: &ToyNetConfig, n: usize) -> Vec<(String, Tensor)> {
        gen_probe_inputs(cfg, n, &mut Rng::seeded(9))
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, x)| (format!("s{i}"), x))
            .collect()
    }

    fn config(w: u32, a: u32) -> PipelineConfig {
        PipelineConfig {
            weight_bits: w,
            act_bits: a,
            fit: FitOptions {
                rank: 8,
                ..FitOptions::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn sixteen_bit_is_near_lossless() {
        let net = ToyNet::new(small()).unwrap();
        let (_, report) = run_pipeline_on(&net, &samples(&net.config, 4), &config(16, 16)).unwrap();
        assert_eq!(report.modules.len(), 4);
        for m in &report.modules {
            assert!(m.accumulated_mse < 1e-4, "{}: {}", m.name, m.accumulated_mse);
        }
    }

    #[test]
    fn gate_extremes() {
        let net = ToyNet::new(small()).unwrap();
        let data = samples(&net.config, 4);
        let mut cfg = config(4, 8);
        cfg.tre.tau = f64::INFINITY;
        let (q, _) = run_pipeline_on(&net, &data, &cfg).unwrap();
        assert_eq!(q.active_adapters(), 0);
        cfg.tre.tau = 0.0;
        let (q, r) = run_pipeline_on(&net, &data, &cfg).unwrap();
        let nonzero = r.modules.iter().filter(|m| m.tre > 0.0).count();
        assert_eq!(q.active_adapters(), nonzero);
        assert!(nonzero > 0);
    }

    #[test]
    fn compensation_does_not_hurt_on_calibration_data() {
        let net = ToyNet::new(small()).unwrap();
        let mut cfg = config(4, 6);
        cfg.tre.tau = 0.0;
        cfg.fit = FitOptions {
            rank: 16,
            lambda: 0.0,
            fit_always: true,
        };
        let (_, r) = run_pipeline_on(&net, &samples(&net.config, 4), &cfg).unwrap();
        for m in &r.modules {
            assert!(m.accumulated_mse <= m.mse_before_compensation + 1e-10, "{}", m.name);
        }
    }

    #[test]
    fn identical_runs_and_trace_accounting() {
        let net = ToyNet::new(small()).unwrap();
        let data = samples(&net.config, 2);
        let cfg = config(4, 8);
        let (qa, mut ra) = run_pipeline_on(&net, &data, &cfg).unwrap();
        let (qb, mut rb) = run_pipeline_on(&net, &data, &cfg).unwrap();
        ra.totals.wall_time_s = 0.0;
        rb.totals.wall_time_s = 0.0;
        assert_eq!(ra, rb);
        assert_eq!(qa, qb);
        for m in &ra.modules {
            let n = QuantPoint::calibration_order(m.kind).len();
            assert_eq!(m.deltas.len(), n);
        }
        let xs: Vec<Tensor> = data.iter().map(|(_, x)| x.clone()).collect();
        let io = qa.calibration_io(&xs).unwrap();
        for (m, rec) in io.iter().zip(&ra.modules) {
            assert_eq!(mse(&m.y, &m.y_q).unwrap(), rec.mse_before_compensation);
        }
    }

    #[test]
    fn exhaustive_landscapes_agree_with_ternary_where_unimodal() {
        let net = ToyNet::new(small()).unwrap();
        let data = samples(&net.config, 2);
        let mut cfg = config(4, 8);
        cfg.search.method = SearchMethod::Exhaustive;
        let (_, r) = run_pipeline_on(&net, &data, &cfg).unwrap();
        for t in r.modules.iter().flat_map(|m| &m.traces) {
            let values: Vec<f64> = t.trace.trace.evaluations.iter().map(|e| e.1).collect();
            assert_eq!(values.len(), cfg.search.grid_n);
            if is_strictly_unimodal(&values) {
                let replay = crate::interval_search::search_ternary(|i| Ok(values[i]), values.len(), 2).unwrap();
                assert_eq!(replay.chosen_index, t.trace.trace.chosen_index);
            }
        }
    }

    #[test]
    fn network_scope_and_gradient_weighting_run() {
        let net = ToyNet::new(small()).unwrap();
        let data = samples(&net.config, 2);
        let mut cfg = config(8, 8);
        cfg.scope = SimilarityScope::Network;
        let (q, _) = run_pipeline_on(&net, &data, &cfg).unwrap();
        assert_eq!(q.quant.len(), 4);
        cfg.scope = SimilarityScope::Local;
        cfg.gradient_weighted = true;
        run_pipeline_on(&net, &data, &cfg).unwrap();
        cfg.scope = SimilarityScope::Network;
        assert!(run_pipeline_on(&net, &data, &cfg).is_err());
    }

    #[test]
    fn accumulated_error_curve() {
        let net = ToyNet::new(small()).unwrap();
        let probe = gen_probe_inputs(&net.config, 2, &mut Rng::seeded(1)).unwrap();
        let zero = measure_accumulated_error(&net, &net, &probe).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
        let (q, _) = run_pipeline_on(&net, &samples(&net.config, 2), &config(4, 8)).unwrap();
        let curve = measure_accumulated_error(&net, &q, &probe).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve.iter().all(|&v| v > 0.0));
        let other = ToyNet::new(ToyNetConfig { depth: 1, ..small() }).unwrap();
        assert!(measure_accumulated_error(&net, &other, &probe).is_err());
    }

    #[test]
    fn selection_pipeline_end_to_end() {
        let cfg = ToyNetConfig {
            seq_len: 8,
            ..small()
        };
        let net = ToyNet::new(cfg.clone()).unwrap();
        let pool = gen_calibration_pool(&cfg, 20, 0.25, &mut Rng::seeded(2)).unwrap();
        let (_, r) = run_taptq_pipeline(&net, &pool, &config(8, 8)).unwrap();
        assert_eq!(r.calibration_ids.len(), 8);
        assert!(r.selection.is_some());
    }
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use taptq::bundle::{checksum, write_atomic, TensorBundle};
use taptq::calibration::{build_calibration_set, stability_scores, SelectionResult, StabilityReport, TokenTaps, DEFAULT_STABILITY_EPS};
use taptq::compensation::{solve_compensation, tre_batch, Adapter};
use taptq::interval_search::{is_strictly_unimodal, search_ternary, SearchMethod, SearchTrace};
use taptq::numerics::{matmul, matmul_nt, truncated_svd, Rng, Tensor};
use taptq::toynet::{
    gen_calibration_pool, gen_probe_inputs, measure_accumulated_error, run_pipeline_on, selection_rng, ToyNet,
};
use taptq::Error;

use crate::config::Overrides;
use crate::run::{
    write_csv, InputDigests, RunDir, RunReport, ADAPTERS_DIR, CALIB_IO_DIR, CURVES_DIR, DEPTH_PROFILE, QNET_DIR,
};
use crate::store;
use crate::{CliError, Format, GenArgs, QuantizeArgs, ReportArgs, RunConfig, SelectArgs, VerifyArgs};

/// τ values shown in the gating table of every report.
pub const TAU_SWEEP: [f64; 6] = [0.0, 0.005, 0.007, 0.01, 0.02, f64::INFINITY];

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn gen(a: &GenArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    let net = ToyNet::new(cfg.net.clone())?;
    let pool = gen_calibration_pool(&cfg.net, cfg.pool_size, cfg.outlier_fraction, &mut Rng::derive(cfg.seed, "pool"))?;
    store::net_to_bundle(&net)?.write(a.out.join("net"))?;
    store::pool_to_bundle(&pool)?.write(a.out.join("pool"))?;
    write_atomic(a.out.join("config.json"), &json_bytes(&cfg)?)?;
    println!(
        "wrote net ({} blocks, d_model {}) and pool of {} samples ({} planted outliers) to {}",
        cfg.net.depth,
        cfg.net.d_model,
        pool.len(),
        pool.planted_outliers.len(),
        a.out.display()
    );
    Ok(())
}

/// Token taps that expose the raw payload as a single layer.
struct PayloadTaps;

impl TokenTaps for PayloadTaps {
    fn token_representations(&self, input: &Tensor) -> taptq::Result<Vec<Tensor>> {
        Ok(vec![input.clone()])
    }
}

#[derive(Debug, Serialize)]
struct SelectionFile {
    n_target: usize,
    seed: u64,
    selected_ids: Vec<String>,
    planted_selected: Vec<String>,
    selection: SelectionResult,
    stability: StabilityReport,
}

pub fn select(a: &SelectArgs) -> Result<(), CliError> {
    if a.n == 0 || a.n % 2 != 0 {
        return Err(CliError::Usage(format!("--n must be a positive even number, got {}", a.n)));
    }
    let pool = store::pool_from_bundle(&TensorBundle::read(&a.pool)?)?;
    let selection = build_calibration_set(&pool, a.n, &mut selection_rng(a.seed))?;
    let stability = match &a.net {
        Some(p) => stability_scores(&pool, &store::net_from_bundle(&TensorBundle::read(p)?)?, DEFAULT_STABILITY_EPS)?,
        None => stability_scores(&pool, &PayloadTaps, DEFAULT_STABILITY_EPS)?,
    };
    let planted_selected: Vec<String> = selection
        .selected_ids
        .iter()
        .filter(|id| pool.planted_outliers.contains(id))
        .cloned()
        .collect();

    let mut calib = TensorBundle::new();
    for id in &selection.selected_ids {
        calib.push(id.clone(), pool.get(id).expect("selected from pool").payload.clone())?;
    }
    calib.set_meta("planted_outliers", &planted_selected)?;
    calib.set_meta("selection_seed", &a.seed)?;
    calib.write(a.out.join("calib"))?;

    let kept = selection.stage1_kept.len();
    let file = SelectionFile {
        n_target: a.n,
        seed: a.seed,
        selected_ids: selection.selected_ids.clone(),
        planted_selected,
        selection,
        stability,
    };
    write_atomic(a.out.join("selection.json"), &json_bytes(&file)?)?;
    println!(
        "selected {} of {} samples ({kept} kept after stage 1, {} clusters); planted outliers selected: {}",
        file.selected_ids.len(),
        pool.len(),
        a.n / 2,
        file.planted_selected.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CurveRow {
    index: usize,
    alpha: f64,
    delta: f64,
    similarity: f64,
}

#[derive(Debug, Serialize)]
struct DepthRow {
    index: usize,
    module: String,
    kind: String,
    accumulated_mse: f64,
    probe_mse: f64,
    tre: f64,
    adapter_active: bool,
    adapter_bytes: usize,
    evaluations: usize,
}

fn depth_rows(r: &RunReport) -> Vec<DepthRow> {
    r.pipeline
        .modules
        .iter()
        .map(|m| DepthRow {
            index: m.index,
            module: m.name.clone(),
            kind: format!("{:?}", m.kind).to_lowercase(),
            accumulated_mse: m.accumulated_mse,
            probe_mse: r.probe_curve.get(m.index).copied().unwrap_or(f64::NAN),
            tre: m.tre,
            adapter_active: m.adapter_active,
            adapter_bytes: m.adapter_bytes,
            evaluations: m.evaluations,
        })
        .collect()
}

pub fn quantize(a: &QuantizeArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    Overrides {
        seed: a.seed,
        method: a.method.map(Into::into),
        bits: a.bits,
        rho: a.rho,
        tau: a.tau,
        rank: a.rank,
        lambda: a.lambda,
        grid_n: a.grid_n,
        scope: a.scope.map(Into::into),
        fit_always: a.fit_always,
    }
    .apply(&mut cfg);

    let net_bundle = TensorBundle::read(&a.net)?;
    let net = store::net_from_bundle(&net_bundle)?;
    cfg.net = net.config.clone();
    cfg.validate()?;
    let calib = TensorBundle::read(&a.calib)?;
    if calib.entries.is_empty() {
        return Err(Error::DegenerateInput(format!("calibration bundle {} is empty", a.calib.display())).into());
    }

    let (qnet, report) = run_pipeline_on(&net, &calib.entries, &cfg.pipeline)?;
    let probes = gen_probe_inputs(&net.config, cfg.probe_count, &mut Rng::derive(cfg.seed, "probe"))?;
    let probe_curve = measure_accumulated_error(&net, &qnet, &probes)?;
    let xs: Vec<Tensor> = calib.entries.iter().map(|(_, x)| x.clone()).collect();
    let io = qnet.calibration_io(&xs)?;

    let dir = RunDir::new(&a.out);
    store::qnet_to_bundle(&qnet)?.write(dir.path(QNET_DIR))?;
    store::adapters_to_bundle(&qnet.adapters)?.write(dir.path(ADAPTERS_DIR))?;
    store::calib_io_to_bundle(&io, xs.len())?.write(dir.path(CALIB_IO_DIR))?;

    let digest = |b: &TensorBundle| -> Result<String, CliError> { Ok(format!("{:016x}", checksum(&b.encode()?.0))) };
    let run = RunReport {
        tool: format!("taptq {}", env!("CARGO_PKG_VERSION")),
        inputs: InputDigests {
            net: digest(&net_bundle)?,
            calib: digest(&calib)?,
        },
        calibration_ids: calib.entries.iter().map(|(id, _)| id.clone()).collect(),
        probe_curve,
        pipeline: report,
        config: cfg,
    };

    for m in &run.pipeline.modules {
        for tp in &m.traces {
            let bw = run.config.pipeline.scheme(tp.point, net.config.seq_len)?.bitwidth();
            let mut evals = tp.trace.trace.evaluations.clone();
            evals.sort_by_key(|e| e.0);
            let rows: Vec<CurveRow> = evals
                .iter()
                .map(|&(i, s)| CurveRow {
                    index: i,
                    alpha: tp.trace.grid.alphas[i],
                    delta: tp.trace.grid.delta(i, bw),
                    similarity: s,
                })
                .collect();
            write_csv(&dir.curve_path(&tp.trace.label), &rows)?;
        }
    }
    write_csv(&dir.path(CURVES_DIR).join(DEPTH_PROFILE), &depth_rows(&run))?;
    dir.save_report(&run)?;

    let last = run.pipeline.modules.last().expect("at least one module");
    println!(
        "quantized W{}A{} with {:?} search: {} evaluations, {} active adapters ({} bytes), final MSE {:.3e} (calibration) {:.3e} (probe)",
        run.config.pipeline.weight_bits,
        run.config.pipeline.act_bits,
        run.config.pipeline.search.method,
        run.pipeline.totals.evaluations,
        run.pipeline.totals.active_adapters,
        run.pipeline.totals.adapter_bytes,
        last.accumulated_mse,
        run.probe_curve.last().copied().unwrap_or(f64::NAN),
    );
    Ok(())
}

/// Modules whose recorded TRE exceeds `tau`, and their adapter bytes.
pub fn gate_at(r: &RunReport, tau: f64) -> (usize, usize) {
    let d = r.config.net.d_model;
    let rank = r.config.pipeline.fit.rank;
    let n = r.pipeline.modules.iter().filter(|m| m.tre > tau).count();
    (n, n * 4 * (d * rank + rank * d + d))
}

#[derive(Debug, Serialize)]
struct TauRow {
    tau: f64,
    active_adapters: usize,
    adapter_bytes: usize,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    run: String,
    config: &'a RunConfig,
    totals: &'a taptq::toynet::PipelineTotals,
    final_accumulated_mse: f64,
    final_probe_mse: f64,
    modules: Vec<DepthRow>,
    tau_sweep: Vec<TauRow>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    run: String,
    index: usize,
    module: String,
    kind: String,
    accumulated_mse: f64,
    probe_mse: f64,
    tre: f64,
    adapter_active: bool,
    adapter_bytes: usize,
    evaluations: usize,
}

fn fmt_tau(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t}")
    }
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let runs = a
        .run
        .iter()
        .map(|p| Ok((p.display().to_string(), RunDir::new(p).load_report()?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let text = match a.format {
        Format::Json => {
            let summaries: Vec<RunSummary> = runs
                .iter()
                .map(|(name, r)| RunSummary {
                    run: name.clone(),
                    config: &r.config,
                    totals: &r.pipeline.totals,
                    final_accumulated_mse: r.pipeline.modules.last().map_or(f64::NAN, |m| m.accumulated_mse),
                    final_probe_mse: r.probe_curve.last().copied().unwrap_or(f64::NAN),
                    modules: depth_rows(r),
                    tau_sweep: TAU_SWEEP
                        .iter()
                        .map(|&tau| {
                            let (n, b) = gate_at(r, tau);
                            TauRow {
                                tau,
                                active_adapters: n,
                                adapter_bytes: b,
                            }
                        })
                        .collect(),
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&summaries)?;
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for (name, r) in &runs {
                for d in depth_rows(r) {
                    w.serialize(CsvRow {
                        run: name.clone(),
                        index: d.index,
                        module: d.module,
                        kind: d.kind,
                        accumulated_mse: d.accumulated_mse,
                        probe_mse: d.probe_mse,
                        tre: d.tre,
                        adapter_active: d.adapter_active,
                        adapter_bytes: d.adapter_bytes,
                        evaluations: d.evaluations,
                    })
                    .map_err(|e| Error::Format(e.to_string()))?;
                }
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).expect("csv output is utf-8")
        }
        Format::Md => markdown(&runs),
    };
    emit(a.out.as_deref(), &text)
}

fn markdown(runs: &[(String, RunReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Quantization runs\n");
    let _ = writeln!(
        s,
        "| run | bits | method | tau | active adapters | adapter bytes | evaluations | final MSE (calibration) | final MSE (probe) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for (name, r) in runs {
        let p = &r.config.pipeline;
        let _ = writeln!(
            s,
            "| {name} | W{}A{} | {:?} | {} | {} | {} | {} | {:.3e} | {:.3e} |",
            p.weight_bits,
            p.act_bits,
            p.search.method,
            fmt_tau(p.tre.tau),
            r.pipeline.totals.active_adapters,
            r.pipeline.totals.adapter_bytes,
            r.pipeline.totals.evaluations,
            r.pipeline.modules.last().map_or(f64::NAN, |m| m.accumulated_mse),
            r.probe_curve.last().copied().unwrap_or(f64::NAN),
        );
    }

    let _ = writeln!(s, "\n## Active adapters per tau\n");
    let _ = write!(s, "| tau |");
    for (name, _) in runs {
        let _ = write!(s, " {name} |");
    }
    let _ = write!(s, "\n|---|");
    for _ in runs {
        let _ = write!(s, "---|");
    }
    let _ = writeln!(s);
    for &tau in &TAU_SWEEP {
        let _ = write!(s, "| {} |", fmt_tau(tau));
        for (_, r) in runs {
            let (n, b) = gate_at(r, tau);
            let _ = write!(s, " {n} ({b} B) |");
        }
        let _ = writeln!(s);
    }

    for (name, r) in runs {
        let _ = writeln!(s, "\n## {name}\n");
        let _ = writeln!(s, "| module | accumulated MSE | probe MSE | TRE | adapter | bytes | evaluations |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for d in depth_rows(r) {
            let _ = writeln!(
                s,
                "| {} | {:.3e} | {:.3e} | {:.4} | {} | {} | {} |",
                d.module,
                d.accumulated_mse,
                d.probe_mse,
                d.tre,
                if d.adapter_active { "on" } else { "off" },
                d.adapter_bytes,
                d.evaluations
            );
        }
    }
    s
}

/// Replays a recorded search against its own evaluations.
fn check_trace(t: &SearchTrace, n: usize, eps_idx: usize) -> Result<Option<String>, String> {
    let mut seen = BTreeSet::new();
    for &(i, s) in &t.evaluations {
        if i >= n || !s.is_finite() || !seen.insert(i) {
            return Err(format!("bad evaluation record at index {i}"));
        }
    }
    if t.chosen_index >= n || !seen.contains(&t.chosen_index) {
        return Err(format!("chosen index {} was never evaluated", t.chosen_index));
    }
    let lookup = |i: usize| {
        t.evaluations
            .iter()
            .find(|e| e.0 == i)
            .map(|e| e.1)
            .ok_or_else(|| Error::Format(format!("index {i} not recorded")))
    };
    match t.method {
        SearchMethod::Ternary => {
            let replay = search_ternary(lookup, n, eps_idx).map_err(|e| format!("ternary replay: {e}"))?;
            if replay.chosen_index != t.chosen_index || replay.evaluations.len() != t.evaluations.len() {
                return Err(format!(
                    "ternary replay chose {} after {} evaluations, record says {} after {}",
                    replay.chosen_index,
                    replay.evaluations.len(),
                    t.chosen_index,
                    t.evaluations.len()
                ));
            }
            Ok(None)
        }
        SearchMethod::Exhaustive => {
            if seen.len() != n {
                return Err(format!("exhaustive search recorded {} of {n} candidates", seen.len()));
            }
            let values: Vec<f64> = (0..n).map(|i| lookup(i).expect("all recorded")).collect();
            let best = (0..n).fold(0, |b, i| if values[i] > values[b] { i } else { b });
            if best != t.chosen_index {
                return Err(format!("argmax is {best}, record says {}", t.chosen_index));
            }
            if is_strictly_unimodal(&values) {
                let replay = search_ternary(|i| Ok(values[i]), n, eps_idx).map_err(|e| e.to_string())?;
                if replay.chosen_index != t.chosen_index {
                    return Err(format!(
                        "unimodal landscape but ternary search picks {}, record says {}",
                        replay.chosen_index, t.chosen_index
                    ));
                }
                Ok(None)
            } else {
                Ok(Some("landscape is not strictly unimodal".into()))
            }
        }
    }
}

fn objective(x: &Tensor, y: &Tensor, y_q: &Tensor, w: &Tensor, b: &[f64], lambda: f64) -> taptq::Result<f64> {
    let pred = y_q.add(&matmul_nt(x, w)?)?.add_row_vector(b)?;
    Ok(y.sub(&pred)?.sum_squares() + lambda * w.sum_squares())
}

fn refit(x: &Tensor, y: &Tensor, y_q: &Tensor, a: &Adapter, lambda: f64) -> taptq::Result<(Tensor, Vec<f64>)> {
    let (w, b) = solve_compensation(x, y, y_q, lambda)?;
    let svd = truncated_svd(&w, a.rank)?;
    let mut u = svd.u;
    for i in 0..u.rows() {
        for (v, s) in u.row_mut(i).iter_mut().zip(&svd.s) {
            *v *= s;
        }
    }
    Ok((matmul(&u, &svd.v)?, b.into_data()))
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let dir = RunDir::new(&a.run);
    let r = dir.load_report()?;
    let adapters_bundle = dir.bundle(ADAPTERS_DIR)?;
    let adapters = store::adapters_from_bundle(&adapters_bundle)?;
    let io_bundle = dir.bundle(CALIB_IO_DIR)?;
    let n_mod = r.pipeline.modules.len();
    let io = store::calib_io_from_bundle(&io_bundle, n_mod)?;
    let samples: usize = io_bundle.meta("samples")?;
    let qnet = store::qnet_from_bundles(&dir.bundle(QNET_DIR)?, &adapters_bundle)?;
    if adapters.len() != n_mod {
        return Err(Error::Format(format!("{} adapters for {n_mod} modules", adapters.len())).into());
    }
    let p = &r.config.pipeline;

    let mut violations = Vec::new();
    let mut notes = Vec::new();
    let mut checks = 0usize;

    for m in &r.pipeline.modules {
        let mut evals = 0;
        for tp in &m.traces {
            checks += 1;
            let t = &tp.trace.trace;
            evals += t.evaluations.len();
            match check_trace(t, tp.trace.grid.alphas.len(), p.search.eps_idx) {
                Ok(None) => {}
                Ok(Some(note)) => notes.push(format!("{}: {note}", tp.trace.label)),
                Err(e) => violations.push(format!("{}: {e}", tp.trace.label)),
            }
        }
        checks += 1;
        if evals != m.evaluations {
            violations.push(format!("{}: {} evaluations recorded, report says {}", m.name, evals, m.evaluations));
        }
    }

    for (k, (m, ad)) in r.pipeline.modules.iter().zip(&adapters).enumerate() {
        let rec = &io[k];
        checks += 1;
        let tre_now = tre_batch(&rec.y, &rec.y_q, samples, &p.tre)?;
        let (s_now, s_rec) = (tre_now.sqrt(), m.tre.sqrt());
        if (s_now - s_rec).abs() > 1e-3 * s_rec + 1e-6 || ad.tre_at_fit != m.tre {
            violations.push(format!("{}: TRE recomputes to {tre_now:.6e}, report says {:.6e}", m.name, m.tre));
        }
        checks += 1;
        let gate = p.compensate && ad.tre_at_fit > p.tre.tau;
        if ad.active != gate || m.adapter_active != ad.active {
            violations.push(format!("{}: adapter state disagrees with the gate at tau={}", m.name, p.tre.tau));
        }
        if ad.active && !ad.fitted {
            violations.push(format!("{}: adapter is active but was never fitted", m.name));
        }
        if ad.fitted {
            checks += 1;
            let stored = ad.product()?;
            let (w_ref, b_ref) = refit(&rec.x, &rec.y, &rec.y_q, ad, p.fit.lambda)?;
            let lam = p.fit.lambda;
            let obj_stored = objective(&rec.x, &rec.y, &rec.y_q, &stored, ad.b.data(), lam)?;
            let obj_ref = objective(&rec.x, &rec.y, &rec.y_q, &w_ref, &b_ref, lam)?;
            let scale = rec.y.sub(&rec.y_q)?.sum_squares();
            if obj_stored > obj_ref * (1.0 + 1e-3) + 1e-9 * scale {
                violations.push(format!(
                    "{}: stored adapter is not least-squares optimal (objective {obj_stored:.6e} vs refit {obj_ref:.6e})",
                    m.name
                ));
            }
        }
    }

    checks += 1;
    let rows = io[0].x.rows() / samples.max(1);
    let xs = (0..samples)
        .map(|s| io[0].x.slice_rows(s * rows, rows))
        .collect::<taptq::Result<Vec<_>>>()?;
    let replay = qnet.calibration_io(&xs)?;
    for (k, (a_io, b_io)) in replay.iter().zip(&io).enumerate() {
        let rel = a_io.y_q.sub(&b_io.y_q)?.frobenius_norm() / b_io.y_q.frobenius_norm().max(1e-300);
        if rel > 1e-2 {
            violations.push(format!(
                "{}: stored quantized net reproduces recorded outputs only to {rel:.2e} relative error",
                r.pipeline.modules[k].name
            ));
        }
    }

    for n in &notes {
        println!("note: {n}");
    }
    for v in &violations {
        eprintln!("violation: {v}");
    }
    println!(
        "{} checks, {} violations, {} non-unimodal landscapes flagged",
        checks,
        violations.len(),
        notes.len()
    );
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(violations.len()))
    }
}

//! One replication of the full pipeline, and the parallel Monte Carlo driver.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{DgpConfig, ExperimentConfig, InferenceMethod, Pipeline, PreWeight};
use super::report::{build_report, McReport, RepRecord, TestRecord, JRecord, StageTiming};
use crate::engine::{run_first_order, run_warm_start, IterationState, Observer, Trace};
use crate::error::{Result, SlimError};
use crate::inference::{plugin_wald, rs_wald, Hypothesis, RandomScalingState};
use crate::jtest::{j_debiased, j_online, j_plugin, JVariant, OnlineGbarState};
use crate::linalg::{inverse_spd, sym_sqrt, symmetrize};
use crate::model::easi::generate_easi_from;
use crate::model::linear_iv::generate_linear_iv_with;
use crate::model::{BaseSample, Dataset, EasiDgpConfig, EasiModel, LinearIvModel, MomentModel};
use crate::oracle::two_step_efficient_gmm;
use crate::refine::{build_operators, run_refinement, OperatorConfig};
use crate::schedule::{select_gamma0, BatchSchedule, LearningRate};

/// Largest tolerated share of diverged replications.
pub const MAX_DIVERGENCE_SHARE: f64 = 0.05;

/// splitmix64 mix of `(seed, rep, tag)`; each replication's seeds depend only
/// on its own index.
pub fn derive_seed(seed: u64, rep: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(rep.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(tag.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, rep: usize, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64, tag))
}

const DATA: u64 = 1;
const ALGORITHM: u64 = 2;
const TUNING: u64 = 3;
const OPERATORS: u64 = 4;

/// A data design with its resolved model and true parameter.
pub struct Design {
    pub dgp: ResolvedDgp,
    pub model: Box<dyn MomentModel<f64>>,
    pub truth: DVector<f64>,
}

#[allow(clippy::large_enum_variant)]
pub enum ResolvedDgp {
    LinearIv(crate::model::LinearIvDesign, LinearIvModel),
    Easi(EasiDgpConfig, BaseSample, EasiModel),
}

impl Design {
    pub fn new(dgp: &DgpConfig) -> Result<Self> {
        match dgp {
            DgpConfig::LinearIv(d) => {
                let model = LinearIvModel::from_design(d)?;
                Ok(Self {
                    truth: DVector::from_vec(d.theta_o.clone()),
                    dgp: ResolvedDgp::LinearIv(d.clone(), model.clone()),
                    model: Box::new(model),
                })
            }
            DgpConfig::Easi(spec) => {
                let cfg = spec.resolve()?;
                let base = BaseSample::synthetic(&cfg.base, cfg.layout()?)?;
                let model = EasiModel::from_config(&cfg)?;
                Ok(Self {
                    truth: DVector::from_vec(cfg.theta_true()?),
                    dgp: ResolvedDgp::Easi(cfg, base, model.clone()),
                    model: Box::new(model),
                })
            }
        }
    }

    pub fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset<f64>> {
        match &self.dgp {
            ResolvedDgp::LinearIv(d, _) => generate_linear_iv_with(d, n, rng),
            ResolvedDgp::Easi(cfg, base, _) => generate_easi_from(cfg, base, n, rng),
        }
    }

    /// Number of moment equations, which fixes the block size of
    /// equation-independent weights.
    pub fn equations(&self) -> usize {
        match &self.dgp {
            ResolvedDgp::LinearIv(..) => 1,
            ResolvedDgp::Easi(_, _, m) => m.layout().m,
        }
    }

    /// `n⁻¹ Σ q q'` of the instrument vector.
    pub fn instrument_second_moment(&self, data: &Dataset<f64>) -> DMatrix<f64> {
        match &self.dgp {
            ResolvedDgp::LinearIv(_, m) => m.instrument_second_moment(data),
            ResolvedDgp::Easi(_, _, m) => {
                let k = m.layout().dim_instruments();
                let mut acc = DMatrix::zeros(k, k);
                for r in data.rows() {
                    let q = DVector::from_vec(m.instruments(r));
                    acc.ger(1.0, &q, &q, 1.0);
                }
                acc / data.n() as f64
            }
        }
    }

    /// Symmetric root of `W_2SLS = I_m ⊗ (n⁻¹ Σ q q')⁻¹`.
    pub fn two_sls_root(&self, data: &Dataset<f64>) -> Result<DMatrix<f64>> {
        let qinv = inverse_spd(&self.instrument_second_moment(data))?;
        let block = sym_sqrt(&symmetrize(&qinv));
        let m = self.equations();
        let k = block.nrows();
        let mut root = DMatrix::zeros(m * k, m * k);
        for j in 0..m {
            root.view_mut((j * k, j * k), (k, k)).copy_from(&block);
        }
        Ok(root)
    }
}

/// Resolved hypotheses with display names.
pub fn hypotheses(cfg: &ExperimentConfig, truth: &DVector<f64>) -> Result<Vec<(String, Hypothesis<f64>)>> {
    let d = truth.len();
    let mut out = Vec::new();
    for &k in &target_indices(cfg, d) {
        out.push((format!("theta_{}", k + 1), Hypothesis::coordinate(d, k, truth[k])?));
    }
    for h in &cfg.hypotheses {
        let rows = h.r.len();
        if h.r.iter().any(|r| r.len() != d) {
            return Err(SlimError::config(format!("hypothesis {}: R rows must have length {d}", h.name)));
        }
        let r = DMatrix::from_fn(rows, d, |i, j| h.r[i][j]);
        let c = match &h.c {
            Some(c) => DVector::from_vec(c.clone()),
            None => &r * truth,
        };
        out.push((h.name.clone(), Hypothesis::new(r, c)?));
    }
    Ok(out)
}

/// Coordinates reported individually: the configured list, or every
/// coordinate when the list is empty.
pub fn target_indices(cfg: &ExperimentConfig, d: usize) -> Vec<usize> {
    if cfg.targets.is_empty() {
        (0..d).collect()
    } else {
        cfg.targets.clone()
    }
}

/// Runs one replication. Divergence, and a moment evaluation failing at an
/// iterate outside the model's domain, are reported as `Ok` with the
/// `diverged` flag set; other errors propagate.
pub fn run_replication(
    cfg: &ExperimentConfig,
    design: &Design,
    rep: usize,
    trace_dir: Option<&Path>,
) -> Result<RepRecord> {
    match replicate(cfg, design, rep, trace_dir) {
        Err(SlimError::Divergence { t, .. }) => {
            log::warn!("replication {rep} diverged at t = {t}");
            Ok(RepRecord::diverged(rep))
        }
        Err(SlimError::Model(msg)) => {
            log::warn!("replication {rep} left the model's domain: {msg}");
            Ok(RepRecord::diverged(rep))
        }
        other => other,
    }
}

fn replicate(
    cfg: &ExperimentConfig,
    design: &Design,
    rep: usize,
    trace_dir: Option<&Path>,
) -> Result<RepRecord> {
    let start = Instant::now();
    let mut data_rng = stream(cfg.seed, rep, DATA);
    let data = design.generate(cfg.n, &mut data_rng)?;
    let mut record = estimate_on(cfg, design, &data, rep, trace_dir)?;
    record.timing.total = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Runs the configured pipeline on a given dataset, using the algorithm
/// streams of replication `rep`. Hypotheses are centred at the design's
/// true parameter.
pub fn estimate_on(
    cfg: &ExperimentConfig,
    design: &Design,
    data: &Dataset<f64>,
    rep: usize,
    trace_dir: Option<&Path>,
) -> Result<RepRecord> {
    let start = Instant::now();
    let mut timing = StageTiming::default();
    let model = design.model.as_ref();
    let d = model.dim_theta();
    let d_g = model.dim_moments();
    let hyps = hypotheses(cfg, &design.truth)?;

    let root = match cfg.pre_weight {
        PreWeight::None => None,
        PreWeight::TwoSls => Some(design.two_sls_root(data)?),
    };
    let theta0 = match &cfg.theta0 {
        Some(v) if v.len() == d => DVector::from_vec(v.clone()),
        Some(v) => return Err(SlimError::dimension("theta0", d, v.len())),
        None => DVector::zeros(d),
    };

    let mut algo_rng = stream(cfg.seed, rep, ALGORITHM);
    let clock = Instant::now();
    let (theta_start, warm_updates) = match &cfg.warm_start {
        Some(ws) => {
            let out = run_warm_start(model, data, ws, theta0, root.as_ref(), &mut algo_rng)?;
            (out.theta_bar, out.updates)
        }
        None => (theta0, 0),
    };
    timing.warm_start = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let gamma0 = match (cfg.gamma0, &cfg.warm_start) {
        (Some(g), _) => g,
        (None, Some(ws)) => {
            select_gamma0(
                model,
                data,
                &theta_start,
                ws,
                cfg.b_g,
                cfg.s0,
                cfg.batch_index_set_limit,
                root.as_ref(),
                derive_seed(cfg.seed, rep as u64, TUNING),
            )?
            .gamma0
        }
        (None, None) => unreachable!("validated"),
    };
    timing.tuning = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let lr = LearningRate::new(gamma0, cfg.a)?;
    let schedule = BatchSchedule::new(cfg.b_g0, cfg.b_g, cfg.batch_growth, cfg.n_first)?;
    let mut state = IterationState::with_rng(theta_start, algo_rng);
    let rs_wanted = cfg.inference.contains(&InferenceMethod::RandomScaling);
    let mut first_rs: Vec<RandomScalingState<f64>> = if rs_wanted && !cfg.pipeline.refines() {
        hyps.iter().map(|(_, h)| RandomScalingState::new(h.r().clone())).collect()
    } else {
        Vec::new()
    };
    let trace_stride = cfg
        .trace
        .as_ref()
        .filter(|t| rep < t.reps && trace_dir.is_some())
        .map(|t| t.stride);
    let mut trace = trace_stride.map(Trace::new);
    {
        let mut hooks: Vec<&mut dyn Observer<f64>> =
            first_rs.iter_mut().map(|s| s as &mut dyn Observer<f64>).collect();
        run_first_order(
            &mut state,
            model,
            data,
            &lr,
            &schedule,
            cfg.n_first,
            root.as_ref(),
            &mut hooks,
            trace.as_mut(),
        )?;
    }
    let first_stage = state.theta_bar.clone();
    timing.first_order = clock.elapsed().as_secs_f64();

    let mut tests = Vec::new();
    let mut jrecords = Vec::new();
    let mut comparator = None;
    let estimate;

    if !cfg.pipeline.refines() {
        estimate = first_stage.clone();
        let clock = Instant::now();
        for ((name, h), rs) in hyps.iter().zip(&first_rs) {
            let res = rs_wald(rs, &estimate, h, cfg.n, cfg.n_first, cfg.b_g, cfg.alpha, cfg.rs_mode.mode())?;
            tests.push(TestRecord::new(name, "rs", h, &res));
        }
        if cfg.jtests.contains(&JVariant::Debiased) {
            jrecords.push(JRecord::new(&j_debiased(model, data, &estimate)?, cfg.alpha));
        }
        timing.inference = clock.elapsed().as_secs_f64();
    } else {
        let clock = Instant::now();
        let op_cfg = OperatorConfig {
            mode: cfg.weight_mode,
            minibatches: cfg.m_mb,
            moment_batch: cfg.b_g,
            equation_block: cfg
                .equation_independent_weight
                .then(|| d_g / design.equations()),
            phi_row_cap: cfg.phi_row_cap,
        };
        let ops = build_operators(
            model,
            data,
            &first_stage,
            cfg.n_first,
            &op_cfg,
            derive_seed(cfg.seed, rep as u64, OPERATORS),
        )?;
        timing.operators = clock.elapsed().as_secs_f64();

        let total = cfg.total();
        let precondition = cfg.pipeline == Pipeline::SecondOrder;
        let refine_gamma0 = if precondition {
            cfg.refine_gamma0
        } else {
            cfg.refine_gamma0 / ops.curvature.max(f64::MIN_POSITIVE)
        };
        let refine_lr = LearningRate::with_offset(refine_gamma0, cfg.a, cfg.n_first)?;

        let comparator_state = cfg.compare_first_order.then(|| state.clone());

        let clock = Instant::now();
        let mut rs: Vec<RandomScalingState<f64>> = if rs_wanted {
            hyps.iter().map(|(_, h)| RandomScalingState::new(h.r().clone())).collect()
        } else {
            Vec::new()
        };
        let mut online = OnlineGbarState::new(d_g);
        {
            let mut hooks: Vec<&mut dyn Observer<f64>> =
                rs.iter_mut().map(|s| s as &mut dyn Observer<f64>).collect();
            hooks.push(&mut online);
            run_refinement(
                &mut state,
                model,
                data,
                &ops,
                &refine_lr,
                &schedule,
                total,
                precondition,
                &mut hooks,
                trace.as_mut(),
            )?;
        }
        estimate = state.theta_bar.clone();
        timing.refinement = clock.elapsed().as_secs_f64();

        if let Some(mut fo) = comparator_state {
            let clock = Instant::now();
            // Continue the identity-weight recursion; the average keeps
            // running over all T iterations.
            run_first_order(
                &mut fo,
                model,
                data,
                &lr,
                &schedule,
                total - cfg.n_first,
                root.as_ref(),
                &mut [],
                None,
            )?;
            comparator = Some(fo.theta_bar);
            timing.comparator = clock.elapsed().as_secs_f64();
        }

        let clock = Instant::now();
        let t_minus_n = total - cfg.n_first;
        for ((name, h), st) in hyps.iter().zip(&rs) {
            let res = rs_wald(st, &estimate, h, cfg.n, t_minus_n, cfg.b_g, cfg.alpha, cfg.rs_mode.mode())?;
            tests.push(TestRecord::new(name, "rs", h, &res));
        }
        if cfg.inference.contains(&InferenceMethod::Plugin) {
            for (name, h) in &hyps {
                let res = plugin_wald(model, data, &estimate, h, t_minus_n, cfg.b_g, cfg.alpha)?;
                tests.push(TestRecord::new(name, "plugin", h, &res));
            }
        }
        for v in &cfg.jtests {
            let res = match v {
                JVariant::Plugin => {
                    let tau = cfg.n as f64 / (t_minus_n as f64 * cfg.b_g as f64);
                    j_plugin(model, data, &estimate, &ops.weight, tau)?
                }
                JVariant::Debiased => j_debiased(model, data, &estimate)?,
                JVariant::Online => j_online(&online, &ops.weight, d, cfg.n, cfg.b_g)?,
            };
            jrecords.push(JRecord::new(&res, cfg.alpha));
        }
        timing.inference = clock.elapsed().as_secs_f64();
    }

    let oracle = if cfg.oracle {
        let clock = Instant::now();
        let r = two_step_efficient_gmm(model, data, &design.truth, None)?;
        timing.oracle = clock.elapsed().as_secs_f64();
        Some(r.second.theta_hat)
    } else {
        None
    };

    if let (Some(tr), Some(dir)) = (&trace, trace_dir) {
        tr.write_csv(dir.join(format!("trace_{rep}.csv")))?;
    }
    timing.total = start.elapsed().as_secs_f64();

    Ok(RepRecord {
        rep,
        diverged: false,
        gamma0,
        warm_start_updates: warm_updates,
        estimate: estimate.iter().copied().collect(),
        first_stage: first_stage.iter().copied().collect(),
        comparator: comparator.map(|c| c.iter().copied().collect()),
        oracle: oracle.map(|c| c.iter().copied().collect()),
        tests,
        jtests: jrecords,
        timing,
    })
}

/// Runs every replication on a pool of `parallel_workers` threads and folds
/// the results in replication order.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<McReport> {
    cfg.validate()?;
    let design = Design::new(&cfg.dgp)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_workers)
        .build()
        .map_err(|e| SlimError::Experiment(e.to_string()))?;
    let clock = Instant::now();
    let records: Vec<Result<RepRecord>> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_replication(cfg, &design, rep, out_dir))
            .collect()
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let wall = clock.elapsed().as_secs_f64();
    let report = build_report(cfg, &design, &records, wall)?;
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    let diverged = records.iter().filter(|r| r.diverged).count();
    if diverged as f64 > MAX_DIVERGENCE_SHARE * cfg.reps as f64 {
        return Err(SlimError::Experiment(format!(
            "{diverged} of {} replications diverged (limit {:.0}%)",
            cfg.reps,
            100.0 * MAX_DIVERGENCE_SHARE
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 11
n = 2000
reps = 3
pipeline = "second_order"
N = 400
T = 800
B_g = 8
B_G0 = 8
M_MB = 200
gamma0 = 0.1
inference = ["random_scaling", "plugin"]
jtests = ["plugin", "debiased", "online"]
compare_first_order = true
oracle = true

[dgp]
kind = "linear_iv"
theta_o = [1.0, -0.5]
d_g = 4
"#;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text).unwrap()
    }

    #[test]
    fn derived_seeds_differ_across_reps_and_tags() {
        let mut seen = std::collections::HashSet::new();
        for rep in 0..100 {
            for tag in 1..=4 {
                assert!(seen.insert(derive_seed(5, rep, tag)));
            }
        }
    }

    #[test]
    fn single_replication_summary_is_its_own_metrics() {
        let c = cfg(&BASE.replace("reps = 3", "reps = 1"));
        let report = run_experiment(&c, None).unwrap();
        let rec = &report.records[0];
        for k in 0..2 {
            let t = format!("theta_{}", k + 1);
            let bias = report.value("slim", &t, "bias").unwrap();
            assert_eq!(bias, rec.estimate[k] - Design::new(&c.dgp).unwrap().truth[k]);
            assert_eq!(report.value("slim", &t, "sd").unwrap(), 0.0);
            assert_eq!(report.value("slim", &t, "rmse").unwrap(), bias.abs());
            let rs = rec.tests.iter().find(|x| x.hypothesis == t && x.method == "rs").unwrap();
            assert_eq!(
                report.value("rs_wald", &t, "rejection_rate").unwrap(),
                if rs.reject { 1.0 } else { 0.0 }
            );
        }
        assert_eq!(report.value("all", "all", "diverged"), Some(0.0));
        assert!(report.value("j_online", "overid", "rejection_rate").is_some());
        assert!(report.value("oracle", "theta_1", "bias").is_some());
        assert!(report.value("first_order", "theta_1", "bias").is_some());
    }

    #[test]
    fn stage_times_fit_in_total() {
        let report = run_experiment(&cfg(BASE), None).unwrap();
        for r in &report.records {
            assert!(r.timing.stage_sum() <= r.timing.total);
        }
    }

    #[test]
    fn worker_count_does_not_change_outputs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c1 = cfg(BASE);
        let c3 = cfg(&format!("{BASE}\n").replace("seed = 11", "seed = 11\nparallel_workers = 3"));
        run_experiment(&c1, Some(a.path())).unwrap();
        run_experiment(&c3, Some(b.path())).unwrap();
        for f in ["summary.csv", "reps.csv"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn first_order_pipeline_with_warm_start_and_trace() {
        let text = r#"
seed = 3
n = 1500
reps = 2
pipeline = "first_order"
N = 500
B_g = 4
B_G0 = 4
jtests = ["debiased"]
pre_weight = "two_sls"

[warm_start]
batch = 100
epochs = 1
gamma0 = 0.05
a = 0.501

[trace]
stride = 100
reps = 1

[dgp]
kind = "linear_iv"
theta_o = [1.0, -0.5]
d_g = 4
"#;
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg(text), Some(dir.path())).unwrap();
        assert!(report.records.iter().all(|r| r.gamma0 > 0.0 && r.warm_start_updates == 15 * 14));
        assert!(dir.path().join("trace_0.csv").exists());
        assert!(!dir.path().join("trace_1.csv").exists());
        let trace = std::fs::read_to_string(dir.path().join("trace_0.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 5);
        let summary = super::super::report::read_summary(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary, report.summary);
    }

    #[test]
    fn easi_refinement_runs_and_reports_rimse() {
        let text = r#"
seed = 5
n = 3000
reps = 1
pipeline = "second_order"
N = 1000
T = 1500
B_g = 16
B_G0 = 16
M_MB = 100
gamma0 = 0.02
targets = [0]
equation_independent_weight = true
compare_first_order = true

[dgp]
kind = "easi"
preset = "reduced"
"#;
        let report = run_experiment(&cfg(text), None).unwrap();
        let slim = report.value("slim", "engel_curves", "rimse").unwrap();
        assert!(slim.is_finite() && slim > 0.0);
        assert_eq!(report.rimse_by_rep("slim")[0], Some(slim));
    }

    #[test]
    fn heavy_divergence_fails_the_experiment() {
        let c = cfg(&BASE.replace("gamma0 = 0.1", "gamma0 = 1e6"));
        assert!(matches!(run_experiment(&c, None), Err(SlimError::Experiment(_))));
    }
}

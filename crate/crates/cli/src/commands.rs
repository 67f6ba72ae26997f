//! The `train`, `diag` and `plot-data` entry points.

use std::path::{Path, PathBuf};

use essvi_mm::agent::{replay, train, AgentError};
use essvi_mm::diagnostics::{
    atm_invariance, cvar_gradient_check, grid_consistency_experiment, intensity_monotonicity_check,
    quote_sensitivities, random_interior_state, sign_jacobian_check, wing_bound_sweep, zero_skew_symmetry,
    CvarGradSpec, DiagError, GridSpec, SensitivityReport, PROBE_ACTION,
};
use essvi_mm::surface::SurfaceError;
use essvi_mm::env::{quoted_surface, reset, Action};
use essvi_mm::risk::{empirical_cvar_exact, empirical_var, ScenarioBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::output::{
    csv_bytes, fmt_f64, read_csv, run_log_bytes, step_log_bytes, write_atomic, RunRow, StepRow, RUN_LOG,
    RUN_LOG_HEADER, SETTINGS, STEP_LOG, STEP_LOG_HEADER,
};
use crate::settings::{self, RunSettings, SettingsError};

/// Failure with the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error("training aborted: {0}")]
    NonFinite(AgentError),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} check(s) failed")]
    DiagFailed(usize),
    #[error("{0}")]
    Artifacts(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Settings(_) | CliError::Artifacts(_) => 2,
            CliError::NonFinite(_) => 3,
            CliError::Runtime(_) | CliError::DiagFailed(_) => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_files(out: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    for (name, bytes) in files {
        let p = out.join(name);
        write_atomic(&p, bytes).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Common inputs of `train` and `diag`.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunSettings, CliError> {
        Ok(settings::load(self.config.as_deref(), &self.overrides, self.seed)?)
    }
}

/// Warm-start plus PPO training; writes `settings.json`, `run_log.csv` and `step_log.csv`.
pub fn cmd_train(args: &ConfigArgs, out: &Path, log: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let s = args.load()?;
    let (env_cfg, agent_cfg) = (s.env_config(), s.agent_config());
    let run = train(&env_cfg, &agent_cfg, s.seed, &mut |e| {
        log(&format!(
            "episode {} reward {:.4} pnl_adj {:.4} bf {:.3e} cal {:.3e} hedge {:.3} alpha {:.4}",
            e.episode, e.reward_sum, e.pnl_adj, e.bf_mean, e.cal_mean, e.hedge_mean, e.alpha_mean
        ))
    })
    .map_err(|e| match e {
        AgentError::NonFiniteGradient => CliError::NonFinite(e),
        other => CliError::Runtime(other.to_string()),
    })?;
    let w = &run.warm_start;
    log(&format!(
        "warm-start loss {:.3e} -> {:.3e} in {} steps, anchor distance {:.3e}, bf+cal {:.3e}",
        w.initial_loss, w.final_loss, w.steps, w.anchor_distance, w.arb_at_mean
    ));
    write_files(
        out,
        &[
            (SETTINGS, s.to_json().into_bytes()),
            (RUN_LOG, run_log_bytes(&run.episodes)),
            (STEP_LOG, step_log_bytes(&run.steps)),
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagKind {
    Sens,
    Grid,
    Wing,
    Cvar,
}

impl DiagKind {
    pub fn name(self) -> &'static str {
        match self {
            DiagKind::Sens => "sens",
            DiagKind::Grid => "grid",
            DiagKind::Wing => "wing",
            DiagKind::Cvar => "cvar",
        }
    }
}

/// One line of a diagnostics summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Empty for informational rows.
    pub threshold: String,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: threshold.into(),
            pass,
        }
    }

    fn info(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, value, "", true)
    }
}

pub const SUMMARY_HEADER: [&str; 4] = ["check", "value", "threshold", "pass"];

fn summary_bytes(checks: &[Check]) -> Vec<u8> {
    csv_bytes(
        &SUMMARY_HEADER,
        checks
            .iter()
            .map(|c| vec![c.name.clone(), fmt_f64(c.value), c.threshold.clone(), c.pass.to_string()]),
    )
}

pub const SENS_HEADER: [&str; 8] = ["state", "maturity", "k", "quantity", "analytic", "fd", "rel_err", "ok"];

fn sens_rows(state: usize, r: &SensitivityReport) -> impl Iterator<Item = Vec<String>> + '_ {
    r.rows.iter().map(move |row| {
        vec![
            state.to_string(),
            fmt_f64(row.maturity),
            fmt_f64(row.k),
            row.quantity.to_string(),
            fmt_f64(row.analytic),
            fmt_f64(row.fd),
            fmt_f64(row.rel_err),
            row.ok.to_string(),
        ]
    })
}

fn diag_sens(s: &RunSettings) -> Result<(Vec<Check>, Vec<(String, Vec<u8>)>), CliError> {
    let cfg = s.env_config();
    let rt = |e: &dyn std::fmt::Display| CliError::Runtime(e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut checks = Vec::new();
    let mut detail: Vec<Vec<String>> = Vec::new();

    let st = reset(&cfg).map_err(|e| rt(&e))?;
    let base = quote_sensitivities(&st, &PROBE_ACTION, &cfg).map_err(|e| rt(&e))?;
    detail.extend(sens_rows(0, &base));
    let mut failures = base.failures().count();
    match atm_invariance(&base, st.spot) {
        Some(atm) => {
            checks.push(Check::new("atm_max_analytic", atm.max_analytic, "1e-8", atm.max_analytic < 1e-8));
            let bound = 1e-6 * st.spot;
            checks.push(Check::new("atm_max_fd", atm.max_fd, fmt_f64(bound), atm.max_fd < bound));
        }
        None => checks.push(Check::new("atm_column_present", 0.0, "1", false)),
    }

    let alphas: Vec<f64> = (1..=10).map(|i| s.alpha_max * 0.095 * i as f64).collect();
    let mut mono_violations = 0;
    let mut redrawn = 0;
    let mut done = 0;
    while done < s.diag_states {
        if redrawn > 20 * s.diag_states {
            return Err(CliError::Runtime("too few interior states".into()));
        }
        let (state, action) = random_interior_state(&cfg, &mut rng).map_err(|e| rt(&e))?;
        match quote_sensitivities(&state, &action, &cfg) {
            Ok(r) => {
                done += 1;
                failures += r.failures().count();
                detail.extend(sens_rows(done, &r).filter(|row| row[7] == "false"));
            }
            Err(DiagError::Surface(SurfaceError::ClampActive(_))) => {
                redrawn += 1;
                continue;
            }
            Err(e) => return Err(rt(&e)),
        }
        mono_violations += intensity_monotonicity_check(&state, &action, &cfg, &alphas)
            .map_err(|e| rt(&e))?
            .violations;
    }
    checks.push(Check::new("sensitivity_mismatches", failures as f64, "0", failures == 0));
    checks.push(Check::info("states_redrawn", redrawn as f64));
    checks.push(Check::new("intensity_monotonicity_violations", mono_violations as f64, "0", mono_violations == 0));

    let sign = sign_jacobian_check(&cfg, s.diag_states, &mut rng).map_err(|e| rt(&e))?;
    checks.push(Check::new("sign_jacobian_violations", sign.violations as f64, "0", sign.pass));

    let ks: Vec<f64> = cfg.k_grid.iter().copied().filter(|k| *k > 0.0).collect();
    let sym = zero_skew_symmetry(0.04, 0.5, &ks, &cfg.caps).map_err(|e| rt(&e))?;
    checks.push(Check::new("zero_skew_psi_even_err", sym.psi_even_err, "1e-10", sym.psi_even_err <= 1e-10));
    checks.push(Check::new("zero_skew_rho_odd_err", sym.rho_odd_err, "1e-10", sym.rho_odd_err <= 1e-10));

    Ok((checks, vec![("diag_sens_detail.csv".into(), csv_bytes(&SENS_HEADER, detail))]))
}

pub const GRID_BF_HEADER: [&str; 6] = ["strike_step", "bf_clean", "floor", "bf_dent", "dent_detected", "ratio_to_previous"];
pub const GRID_CAL_HEADER: [&str; 6] = [
    "maturity_step",
    "cal_clean_hard",
    "cal_clean_soft",
    "soft_bound",
    "cal_swap_pair",
    "swap_per_dt",
];

fn diag_grid(s: &RunSettings) -> Result<(Vec<Check>, Vec<(String, Vec<u8>)>), CliError> {
    let spec = GridSpec {
        tau_arb: s.tau_arb,
        ..GridSpec::default()
    };
    let r = grid_consistency_experiment(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    let checks = vec![
        Check::new("bf_rate", r.bf_ratios.iter().flatten().count() as f64, "ratios in [2.5, 6] or floor", r.bf_rate_ok),
        Check::new("bf_dent_detected", r.bf.iter().filter(|l| l.dent_detected).count() as f64, fmt_f64(r.bf.len() as f64), r.bf_detect_ok),
        Check::new(
            "cal_clean_hard_max",
            r.cal.iter().map(|l| l.cal_clean_hard).fold(0.0, f64::max),
            "0",
            r.cal.iter().all(|l| l.cal_clean_hard == 0.0),
        ),
        Check::new(
            "cal_clean_soft_excess",
            r.cal.iter().map(|l| l.cal_clean_soft - l.soft_bound).fold(f64::NEG_INFINITY, f64::max),
            "0",
            r.cal_clean_ok,
        ),
        Check::new(
            "cal_swap_min_per_dt",
            r.cal.iter().map(|l| l.swap_per_dt).fold(f64::INFINITY, f64::min),
            fmt_f64(r.cal_rate_constant),
            r.cal_rate_ok,
        ),
    ];
    let bf = csv_bytes(
        &GRID_BF_HEADER,
        r.bf.iter().enumerate().map(|(i, l)| {
            let ratio = if i == 0 { None } else { r.bf_ratios[i - 1] };
            vec![
                fmt_f64(l.strike_step),
                fmt_f64(l.bf_clean),
                fmt_f64(l.floor),
                fmt_f64(l.bf_dent),
                l.dent_detected.to_string(),
                ratio.map(fmt_f64).unwrap_or_default(),
            ]
        }),
    );
    let cal = csv_bytes(
        &GRID_CAL_HEADER,
        r.cal.iter().map(|l| {
            vec![
                fmt_f64(l.maturity_step),
                fmt_f64(l.cal_clean_hard),
                fmt_f64(l.cal_clean_soft),
                fmt_f64(l.soft_bound),
                fmt_f64(l.cal_swap_pair),
                fmt_f64(l.swap_per_dt),
            ]
        }),
    );
    Ok((checks, vec![("diag_grid_bf.csv".into(), bf), ("diag_grid_cal.csv".into(), cal)]))
}

fn diag_wing(s: &RunSettings) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let caps = s.env_config().caps;
    let r = wing_bound_sweep(s.wing_samples, s.wing_k_eval, &caps, &mut rng);
    vec![
        Check::new("max_slope", r.max_slope, fmt_f64(r.bound), r.max_slope <= r.bound),
        Check::new("lee_barrier", r.max_slope, "2", r.lee_ok),
    ]
}

fn diag_cvar(s: &RunSettings) -> Result<Vec<Check>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let spec = CvarGradSpec {
        tail_fraction: s.tail_fraction,
        ..CvarGradSpec::default()
    };
    let r = cvar_gradient_check(&spec, &mut rng).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(vec![
        Check::info("pathwise_gradient", r.pathwise),
        Check::info("crn_fd_gradient", r.fd_crn),
        Check::new("pathwise_vs_crn_rel_err", r.rel_err, "1e-2", r.rel_err < 1e-2),
        Check::new(
            "independent_over_crn_variance",
            r.var_independent / r.var_crn,
            "10",
            r.var_independent >= 10.0 * r.var_crn,
        ),
        Check::new("inert_channel_gradient", r.inert_gradient, "0", r.inert_gradient == 0.0),
        Check::info("gradient_tau_1e-2", r.tau_coarse),
        Check::info("gradient_tau_1e-3", r.tau_fine),
    ])
}

/// Runs one diagnostic and writes `diag_<kind>.csv` plus any detail tables.
///
/// Returns the checks; fails with [`CliError::DiagFailed`] after writing the
/// report when any check fails.
pub fn cmd_diag(kind: DiagKind, args: &ConfigArgs, out: &Path, log: &mut dyn FnMut(&str)) -> Result<Vec<Check>, CliError> {
    let s = args.load()?;
    let (checks, extra) = match kind {
        DiagKind::Sens => diag_sens(&s)?,
        DiagKind::Grid => diag_grid(&s)?,
        DiagKind::Wing => (diag_wing(&s), Vec::new()),
        DiagKind::Cvar => (diag_cvar(&s)?, Vec::new()),
    };
    let mut files: Vec<(String, Vec<u8>)> = vec![(format!("diag_{}.csv", kind.name()), summary_bytes(&checks))];
    files.extend(extra);
    let refs: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    write_files(out, &refs)?;
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.pass).collect();
    for c in &checks {
        let mark = if c.pass { "ok  " } else { "FAIL" };
        log(&format!("{mark} {} = {:.6e} (threshold {})", c.name, c.value, c.threshold));
    }
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::DiagFailed(failed.len()))
    }
}

pub const PNL_HIST_HEADER: [&str; 5] = ["bin_lo", "bin_hi", "count", "var5", "cvar5"];
pub const SURFACE_COMPARE_HEADER: [&str; 4] = ["maturity", "k", "sigma_true", "sigma_quoted"];
pub const TRAINING_CURVES_HEADER: [&str; 10] = [
    "episode",
    "reward",
    "pnl_adj",
    "bf",
    "cal",
    "shape",
    "cvar",
    "hedge_mean",
    "alpha_mean",
    "act_std",
];

/// Number of bins in `pnl_hist.csv`.
pub const PNL_BINS: usize = 50;

/// Equal-width histogram over `[min, max]`; the last bin is closed.
pub fn histogram(x: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let a = lo + width * i as f64;
            let b = if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 };
            (a, b, c)
        })
        .collect()
}

/// Turns a finished run directory into plot-ready tables.
pub fn cmd_plot_data(run_dir: &Path, out: &Path) -> Result<(), CliError> {
    let art = CliError::Artifacts;
    let settings_path = run_dir.join(SETTINGS);
    let s = settings::load(Some(&settings_path), &[], None).map_err(|e| art(e.to_string()))?;
    let runs: Vec<RunRow> = read_csv(&run_dir.join(RUN_LOG), &RUN_LOG_HEADER).map_err(art)?;
    let steps: Vec<StepRow> = read_csv(&run_dir.join(STEP_LOG), &STEP_LOG_HEADER).map_err(art)?;
    if steps.is_empty() || runs.is_empty() {
        return Err(art(format!("{} holds an empty run", run_dir.display())));
    }

    let pnl = ScenarioBatch {
        pnl: steps.iter().map(|r| r.pnl_quote + r.pnl_hedge).collect(),
    };
    let var5 = -empirical_var(&pnl, 0.05);
    let cvar5 = -empirical_cvar_exact(&pnl, 0.05);
    let hist = csv_bytes(
        &PNL_HIST_HEADER,
        histogram(&pnl.pnl, PNL_BINS)
            .into_iter()
            .map(|(a, b, c)| vec![fmt_f64(a), fmt_f64(b), c.to_string(), fmt_f64(var5), fmt_f64(cvar5)]),
    );

    let env_cfg = s.env_config();
    let actions: Vec<Action> = steps
        .iter()
        .map(|r| Action {
            alpha: r.alpha,
            hedge: r.hedge,
            psi_scale: r.psi_scale,
            rho_shift: r.rho_shift,
            dual: r.dual,
        })
        .collect();
    let rep = replay(&env_cfg, &s.agent_config(), s.seed, &actions).map_err(|e| art(format!("replay failed: {e}")))?;
    let logged: Vec<f64> = steps.iter().map(|r| r.reward).collect();
    if rep.rewards != logged {
        return Err(art(format!("{} does not match {}", STEP_LOG, SETTINGS)));
    }
    let quoted = quoted_surface(&rep.last_state, &rep.last_action, &env_cfg);
    let mut rows = Vec::with_capacity(env_cfg.maturities.len() * env_cfg.k_grid.len());
    for (m, &t) in env_cfg.maturities.iter().enumerate() {
        for &k in &env_cfg.k_grid {
            rows.push(vec![
                fmt_f64(t),
                fmt_f64(k),
                fmt_f64(rep.last_state.latent.implied_vol(m, k, &env_cfg.caps)),
                fmt_f64(quoted.implied_vol(m, k, &env_cfg.caps)),
            ]);
        }
    }
    let surface = csv_bytes(&SURFACE_COMPARE_HEADER, rows);

    let curves = csv_bytes(
        &TRAINING_CURVES_HEADER,
        runs.iter().map(|r| {
            let mut row = vec![r.episode.to_string()];
            row.extend(
                [
                    r.reward_sum,
                    r.pnl_adj,
                    r.bf_mean,
                    r.cal_mean,
                    r.shape_mean,
                    r.cvar_mean,
                    r.hedge_mean,
                    r.alpha_mean,
                    r.act_std,
                ]
                .map(fmt_f64),
            );
            row
        }),
    );

    write_files(
        out,
        &[
            ("pnl_hist.csv", hist),
            ("surface_compare.csv", surface),
            ("training_curves.csv", curves),
        ],
    )
}

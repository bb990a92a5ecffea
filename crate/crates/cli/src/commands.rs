//! The four subcommands: generate, fit-and-bound, benchmark, verify.

use std::path::PathBuf;

use serde_json::json;

use cdte::bench::{
    conditional_mean, enclosure_check, generate_synth, orthogonality_probe, run_benchmark,
    sharpness_check, BenchmarkConfig, SettingKind, SynthSetting, PROBE_MIN_BUDGET, SHARPNESS_TOL,
};
use cdte::learners::{
    train_learner, LearnerConfig, LearnerKind, LearnerModel, LossKind, TrainedLearner, WorkingModel,
};
use cdte::nuisance::{CdfMethod, CondCdfModel};
use cdte::{EstimandKind, EvalGrid};

use crate::config::{parse_list, Config};
use crate::io;
use crate::{BenchmarkArgs, Failure, FitArgs, GenerateArgs, VerifyArgs};

/// Slope thresholds of the orthogonality probe in the verify battery: the
/// corrected pseudo-outcomes must show a second-order (slope about 2)
/// response to nuisance perturbations, the uncorrected ones a first-order
/// (slope about 1) response.
const AU_SLOPE_MIN: f64 = 1.9;
const CA_SLOPE_MAX: f64 = 1.3;

/// Probe perturbation sizes used by the verify battery.
const PROBE_T_VALUES: [f64; 4] = [0.4, 0.2, 0.1, 0.05];

fn run_err(e: cdte::Error) -> Failure {
    Failure::run(e.to_string())
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

/// Conditional CDF backend from the `cdf-method` and `bandwidth-scale`
/// settings; `None` when neither the flags nor the config set them, so the
/// caller can keep its own default.
fn resolve_cdf_method(
    cfg: &Config,
    name: Option<String>,
    bw: Option<f64>,
) -> Result<Option<CdfMethod>, Failure> {
    let name = cfg.resolve(name, "cdf-method")?;
    let bw = cfg.resolve(bw, "bandwidth-scale")?;
    match name.as_deref() {
        None => match bw {
            None => Ok(None),
            Some(s) => Ok(Some(CdfMethod::KernelEmpirical { bandwidth_scale: s })),
        },
        Some("kernel") => Ok(Some(CdfMethod::KernelEmpirical {
            bandwidth_scale: bw.unwrap_or(1.0),
        })),
        Some("gaussian") => Ok(Some(CdfMethod::GaussianLocScale)),
        Some(other) => Err(Failure::usage(format!(
            "unknown cdf method '{other}' (expected kernel or gaussian)"
        ))),
    }
}

pub fn generate(args: &GenerateArgs, cfg: &Config) -> Result<(), Failure> {
    let setting = cfg
        .resolve(args.setting, "setting")?
        .unwrap_or(SettingKind::Normal);
    let seed = cfg.resolve(args.seed, "seed")?.unwrap_or(0);
    let n = cfg.resolve(args.n, "n")?.unwrap_or(1000);
    let out: PathBuf = cfg
        .resolve(args.out.clone(), "out")?
        .ok_or_else(|| Failure::usage("generate needs --out"))?;
    if n == 0 {
        return Err(Failure::usage("--n must be at least 1"));
    }
    let data = generate_synth(&SynthSetting::new(setting, seed), n).map_err(run_err)?;
    io::write_dataset_csv(&out, &data)?;
    println!("wrote {} rows to {}", data.n(), out.display());
    Ok(())
}

pub fn fit_and_bound(args: &FitArgs, cfg: &Config) -> Result<(), Failure> {
    let data_path: PathBuf = cfg
        .resolve(args.data.clone(), "data")?
        .ok_or_else(|| Failure::usage("fit-and-bound needs --data"))?;
    let data = io::read_dataset_csv(&data_path)?;

    let learner = cfg
        .resolve(args.learner, "learner")?
        .unwrap_or(LearnerKind::Au);
    let estimand = cfg
        .resolve(args.estimand, "estimand")?
        .unwrap_or(EstimandKind::Cdf);
    let loss = cfg.resolve(args.loss, "loss")?.unwrap_or(LossKind::Crps);
    let n_delta = cfg.resolve(args.n_delta, "n-delta")?.unwrap_or(50);
    let n_alpha = cfg.resolve(args.n_alpha, "n-alpha")?.unwrap_or(50);
    let n_y = cfg.resolve(args.n_y, "n-y")?.unwrap_or(200);
    let delta_min = cfg.resolve(args.delta_min, "delta-min")?;
    let delta_max = cfg.resolve(args.delta_max, "delta-max")?;
    let benefit_only = cfg.resolve_switch(args.benefit_only, "benefit-only")?;

    let base = EvalGrid::from_outcomes(
        &data.arm_outcomes(1),
        &data.arm_outcomes(0),
        n_delta,
        n_alpha,
        n_y,
    )
    .map_err(run_err)?;
    let grid = match (delta_min, delta_max, benefit_only) {
        (None, None, false) => base,
        (Some(lo), Some(hi), false) => {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Failure::usage(format!(
                    "--delta-min {lo} must be finite and below --delta-max {hi}"
                )));
            }
            EvalGrid::new(linspace(lo, hi, n_delta), base.alpha, base.y).map_err(run_err)?
        }
        (None, None, true) => {
            if estimand != EstimandKind::Cdf {
                return Err(Failure::usage(
                    "--benefit-only reports a distribution bound at effect value 0 \
                     and needs --estimand cdf",
                ));
            }
            // Two grid points so curve validation still applies; only the
            // effect-value-0 entry is exported.
            EvalGrid::new(vec![-1e-6, 0.0], base.alpha, base.y).map_err(run_err)?
        }
        (_, _, true) => {
            return Err(Failure::usage(
                "--benefit-only cannot be combined with --delta-min/--delta-max",
            ))
        }
        _ => {
            return Err(Failure::usage(
                "--delta-min and --delta-max must be given together",
            ))
        }
    };

    let mut lc = LearnerConfig::new(learner, estimand, loss, grid);
    if let Some(g) = cfg.resolve(args.gamma, "gamma")? {
        lc.gamma = g;
    }
    if let Some(k) = cfg.resolve(args.k_folds, "k-folds")? {
        lc.k_folds = k;
    }
    if let Some(c) = cfg.resolve(args.clip_floor, "clip-floor")? {
        lc.clip_floor = c;
    }
    if let Some(r) = cfg.resolve(args.ridge, "ridge")? {
        lc.ridge = r;
    }
    if let Some(m) = resolve_cdf_method(cfg, args.cdf_method.clone(), args.bandwidth_scale)? {
        lc.cdf_method = m;
    }

    let trained = train_learner(&data, &lc).map_err(run_err)?;

    let queries: Vec<Vec<f64>> = match cfg.resolve(args.query_csv.clone(), "query-csv")? {
        Some(p) => io::read_query_csv(&p, data.dim())?,
        None => (0..data.n()).map(|i| data.x_row(i).to_vec()).collect(),
    };

    let mut total_crossings = 0usize;
    let mut out = String::from("row_id,grid_value,lower,upper\n");
    for (row_id, x) in queries.iter().enumerate() {
        let (pair, crossings) = trained.predict(x).map_err(run_err)?;
        total_crossings += crossings;
        let export: &[usize] = if benefit_only {
            &[pair.grid.len() - 1]
        } else {
            &(0..pair.grid.len()).collect::<Vec<_>>()
        };
        for &j in export {
            out.push_str(&format!(
                "{row_id},{:?},{:?},{:?}\n",
                pair.grid[j], pair.lower[j], pair.upper[j]
            ));
        }
    }

    let out_bounds: PathBuf = cfg
        .resolve(args.out_bounds.clone(), "out-bounds")?
        .unwrap_or_else(|| PathBuf::from("bounds.csv"));
    io::write_text(&out_bounds, &out)?;
    println!(
        "wrote bounds for {} query points to {}",
        queries.len(),
        out_bounds.display()
    );
    println!("crossings: {total_crossings}");

    if let Some(mp) = cfg.resolve(args.out_models.clone(), "out-models")? {
        let doc = models_json(&trained);
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Failure::run(format!("cannot serialize models: {e}")))?;
        io::write_text(&mp, &text)?;
        println!("wrote model summary to {}", mp.display());
    }
    Ok(())
}

fn cdf_model_json(m: &CondCdfModel) -> serde_json::Value {
    match m {
        CondCdfModel::GaussianLocScale {
            arm,
            mean_weights,
            scale,
        } => json!({
            "type": "gaussian_loc_scale",
            "arm": arm,
            "mean_weights": mean_weights,
            "scale": scale,
        }),
        CondCdfModel::KernelEmpirical {
            arm,
            dim,
            ys,
            bandwidths,
            h_y,
            ..
        } => json!({
            "type": "kernel_empirical",
            "arm": arm,
            "dim": dim,
            "n_train": ys.len(),
            "bandwidths": bandwidths,
            "h_y": h_y,
        }),
    }
}

fn working_model_json(w: &WorkingModel) -> serde_json::Value {
    json!({
        "side": w.side.to_string(),
        "estimand": w.kind.to_string(),
        "grid": w.grid,
        "coefs": w.coefs,
    })
}

/// Structured summary of a trained learner: configuration, per-fold
/// nuisance fits (kernel models summarized by their shape) and the final
/// prediction model with full second-stage coefficients.
fn models_json(t: &TrainedLearner) -> serde_json::Value {
    let folds: Vec<serde_json::Value> = t
        .fit
        .folds
        .iter()
        .map(|f| {
            json!({
                "propensity": {
                    "weights": f.propensity.weights,
                    "clip_floor": f.propensity.clip_floor,
                    "converged": f.propensity.converged,
                },
                "cdf0": cdf_model_json(&f.cdf0),
                "cdf1": cdf_model_json(&f.cdf1),
            })
        })
        .collect();
    let model = match &t.model {
        LearnerModel::Direct => json!({ "type": "direct" }),
        LearnerModel::Reweighted { cdf0, cdf1 } => json!({
            "type": "reweighted",
            "cdf0": cdf_model_json(cdf0),
            "cdf1": cdf_model_json(cdf1),
        }),
        LearnerModel::TwoStage { lower, upper } => json!({
            "type": "two_stage",
            "lower": working_model_json(lower),
            "upper": working_model_json(upper),
        }),
    };
    json!({
        "learner": t.config.learner.to_string(),
        "estimand": t.config.estimand.to_string(),
        "loss": t.config.loss.to_string(),
        "gamma": t.config.effective_gamma(),
        "k_folds": t.config.k_folds,
        "clip_floor": t.config.clip_floor,
        "ridge": t.config.ridge,
        "folds": folds,
        "model": model,
    })
}

pub fn benchmark(args: &BenchmarkArgs, cfg: &Config) -> Result<(), Failure> {
    let setting = cfg
        .resolve(args.setting, "setting")?
        .unwrap_or(SettingKind::Normal);
    let mut seeds: Vec<u64> = match cfg.resolve(args.seeds.clone(), "seeds")? {
        Some(raw) => parse_list(&raw, "seeds")?,
        None => vec![cfg.resolve(args.seed, "seed")?.unwrap_or(0)],
    };
    let mut sizes: Vec<usize> = match cfg.resolve(args.n_train.clone(), "n-train")? {
        Some(raw) => parse_list(&raw, "n-train")?,
        None => vec![1000],
    };
    let learners: Vec<LearnerKind> = match cfg.resolve(args.learners.clone(), "learners")? {
        Some(raw) => parse_list(&raw, "learners")?,
        None => vec![
            LearnerKind::Plugin,
            LearnerKind::Iptw,
            LearnerKind::Ca,
            LearnerKind::Au,
        ],
    };
    if seeds.is_empty() || sizes.is_empty() || learners.is_empty() {
        return Err(Failure::usage(
            "seeds, n-train and learners must be nonempty",
        ));
    }
    // canonical report order regardless of how the lists were written
    seeds.sort_unstable();
    seeds.dedup();
    sizes.sort_unstable();
    sizes.dedup();

    let mut out =
        String::from("seed,n_train,learner,side,estimand,rcrps_in,rcrps_out,w2_in,w2_out\n");
    let mut n_rows = 0usize;
    for &seed in &seeds {
        for &n in &sizes {
            let mut bc = BenchmarkConfig::new(SynthSetting::new(setting, seed), n);
            bc.learners = learners.clone();
            if let Some(v) = cfg.resolve(args.n_test, "n-test")? {
                bc.n_test = v;
            }
            if let Some(v) = cfg.resolve(args.estimand, "estimand")? {
                bc.estimand = v;
            }
            if let Some(v) = cfg.resolve(args.loss, "loss")? {
                bc.loss = v;
            }
            bc.gamma = cfg.resolve(args.gamma, "gamma")?;
            if let Some(v) = cfg.resolve(args.k_folds, "k-folds")? {
                bc.k_folds = v;
            }
            if let Some(v) = cfg.resolve(args.clip_floor, "clip-floor")? {
                bc.clip_floor = v;
            }
            if let Some(m) = resolve_cdf_method(cfg, args.cdf_method.clone(), args.bandwidth_scale)?
            {
                bc.cdf_method = m;
            }
            bc.oracle_nuisance = cfg.resolve_switch(args.oracle_nuisance, "oracle-nuisance")?;
            if let Some(v) = cfg.resolve(args.n_delta, "n-delta")? {
                bc.n_delta = v;
            }
            if let Some(v) = cfg.resolve(args.n_alpha, "n-alpha")? {
                bc.n_alpha = v;
            }
            if let Some(v) = cfg.resolve(args.n_y, "n-y")? {
                bc.n_y = v;
            }
            let report = run_benchmark(&bc).map_err(run_err)?;
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{:?},{:?},{:?},{:?}\n",
                    r.seed,
                    r.n_train,
                    r.learner,
                    r.side,
                    r.estimand,
                    r.rcrps_in,
                    r.rcrps_out,
                    r.w2_in,
                    r.w2_out
                ));
                n_rows += 1;
            }
        }
    }
    let out_path: PathBuf = cfg
        .resolve(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));
    io::write_text(&out_path, &out)?;
    println!("wrote {n_rows} metric rows to {}", out_path.display());
    Ok(())
}

pub fn verify(args: &VerifyArgs, cfg: &Config) -> Result<(), Failure> {
    let probe_draws = cfg
        .resolve(args.probe_draws, "probe-draws")?
        .unwrap_or(100_000);
    let enclosure_draws = cfg
        .resolve(args.enclosure_draws, "enclosure-draws")?
        .unwrap_or(1_000_000);
    let instances = cfg
        .resolve(args.sharpness_instances, "sharpness-instances")?
        .unwrap_or(100);
    let seed = cfg.resolve(args.seed, "seed")?.unwrap_or(0);
    if probe_draws < PROBE_MIN_BUDGET {
        return Err(Failure::usage(format!(
            "--probe-draws must be at least {PROBE_MIN_BUDGET}"
        )));
    }
    if instances == 0 || enclosure_draws == 0 {
        return Err(Failure::usage(
            "--sharpness-instances and --enclosure-draws must be positive",
        ));
    }
    let mut all_pass = true;
    let mut report = |name: &str, passed: bool, detail: String| {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        all_pass &= passed;
    };

    let sr = sharpness_check(instances, seed).map_err(run_err)?;
    report(
        "sharpness",
        sr.passed,
        format!(
            "max gap to coupling optimum {:.3e} over {} instances (tolerance {:.0e})",
            sr.max_gap, sr.instances, SHARPNESS_TOL
        ),
    );

    let setting = SynthSetting::new(SettingKind::Normal, seed);
    let x = [0.7, -0.3];
    let tau = conditional_mean(1, &x) - conditional_mean(0, &x);
    let deltas = linspace(tau - 6.0, tau + 6.0, 50);
    let er = enclosure_check(&setting, &x, &deltas, enclosure_draws).map_err(run_err)?;
    report(
        "enclosure",
        er.passed,
        format!(
            "worst margin lower {:.3e}, upper {:.3e} over {} draws (needs >= 0)",
            er.worst_lower_margin, er.worst_upper_margin, er.n_draws
        ),
    );

    let pr = orthogonality_probe(&setting, &PROBE_T_VALUES, probe_draws).map_err(run_err)?;
    report(
        "orthogonality",
        pr.au_slope >= AU_SLOPE_MIN && pr.ca_slope <= CA_SLOPE_MAX,
        format!(
            "corrected slope {:.3} (needs >= {AU_SLOPE_MIN}), uncorrected slope {:.3} \
             (needs <= {CA_SLOPE_MAX}), {} draws",
            pr.au_slope, pr.ca_slope, pr.n_draws
        ),
    );

    if all_pass {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Failure::run("verification battery failed"))
    }
}

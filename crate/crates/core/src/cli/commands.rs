//! The six studies. Each one reads all of its keys in `prepare` (so unknown
//! keys are caught before any work starts) and then runs.

use super::{build_ensemble, ensemble_name, ensemble_spec, solver_params, table_spec, Config, ConfigError, Context, Summary};
use crate::dirichlet::{
    calibrate_sigma, campanato_check, default_radii, homogenization_error, ratio_flags, solve, solve_heterogeneous,
    solve_homogenized, unit_cell_averages, BoundaryData, Coefficients, DirichletProblem, RegularityParams,
    RegularityReport, Rhs, Shape,
};
use crate::fields::{
    cell_phase, mixing_probe_from, sample_field, CellBox, CellFunctional, EnsembleKind, EnsembleSpec, Phase,
};
use crate::grid::{
    adjointness_residual, discrete_divergence, helmholtz_project, solenoidal_param, spectral_divergence, Boundary,
    Grid2, GridField, Location, PeriodicField, TriadicCube,
};
use crate::homogenize::{
    error_e, estimate_model, fit_curve, fit_rate, sample_seed, scale_sweep, Ensemble, HomogenizedModel, ModelParams,
    ParamPoint, SweepParams,
};
use crate::subadd::{append_records, check_partition, solve_mu, solve_mu0, Medium, SolverParams};
use crate::varrep::{
    convexity_window, make_linear_representative, selfdual_proximal_average, selfduality_residual, tabulate,
    verify_representation, ExtendedRepresentative, FitzpatrickParams, ProximalParams, TableSpec,
    VerifyParams,
};
use anyhow::Context as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

pub(super) enum Study {
    Represent(Represent),
    Homogenize(Homogenize),
    DirichletError(DirichletStudy),
    Lipschitz(Lipschitz),
    Mixing(Mixing),
    Check(Check),
}

pub(super) fn prepare(command: &str, cfg: &Config) -> Result<Study, ConfigError> {
    Ok(match command {
        "represent" => Study::Represent(Represent::read(cfg)?),
        "homogenize" => Study::Homogenize(Homogenize::read(cfg)?),
        "dirichlet-error" => Study::DirichletError(DirichletStudy::read(cfg)?),
        "lipschitz" => Study::Lipschitz(Lipschitz::read(cfg)?),
        "mixing-probe" => Study::Mixing(Mixing::read(cfg)?),
        "check" => Study::Check(Check::read(cfg)?),
        other => return Err(ConfigError::Invalid { key: "command".into(), line: 0, msg: format!("unknown command `{other}`") }),
    })
}

impl Study {
    pub(super) fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        match self {
            Study::Represent(s) => s.run(ctx),
            Study::Homogenize(s) => s.run(ctx),
            Study::DirichletError(s) => s.run(ctx),
            Study::Lipschitz(s) => s.run(ctx),
            Study::Mixing(s) => s.run(ctx),
            Study::Check(s) => s.run(ctx),
        }
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pair(v: [f64; 4]) -> ([f64; 2], [f64; 2]) {
    ([v[0], v[1]], [v[2], v[3]])
}

/// Distinct phases in order of first appearance.
fn distinct_phases(spec: &EnsembleSpec) -> Vec<Phase> {
    let mut out: Vec<Phase> = Vec::new();
    for p in spec.phases() {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn seeds_with_offset(seeds: &[u64], ctx: &Context) -> Vec<u64> {
    seeds.iter().map(|s| s + ctx.seed_offset).collect()
}

/// Medium covering the box of unit cells `|z|_inf <= radius`.
fn medium_around(ens: &Ensemble, radius: usize, seed: u64) -> anyhow::Result<Medium> {
    let s = sample_field(&ens.spec, CellBox::centered([0, 0], 2 * radius as i64 + 1)?, seed)?;
    Ok(Medium::new(s, ens.laws.clone()))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn shape_key(cfg: &Config, key: &str, default: &str) -> Result<Shape, ConfigError> {
    match cfg.str_or(key, default).as_str() {
        "ball" => Ok(Shape::Ball),
        "box" => Ok(Shape::Box),
        other => Err(cfg.reject(key, format!("expected ball or box, got `{other}`"))),
    }
}

fn model_params(cfg: &Config, section: &str, n_top: u32, samples: usize, sweep: SweepParams) -> Result<ModelParams, ConfigError> {
    let d = ModelParams::default();
    Ok(ModelParams {
        n_top: cfg.or(&format!("{section}.model_level"), n_top)?,
        samples: cfg.positive_count(&format!("{section}.model_samples"), samples)?,
        pq_bound: cfg.positive(&format!("{section}.pq_bound"), d.pq_bound)?,
        pq_points: cfg.positive_count(&format!("{section}.pq_points"), d.pq_points)?,
        dual_points: cfg.positive_count(&format!("{section}.dual_points"), d.dual_points)?,
        width_ceiling: cfg.positive(&format!("{section}.width_ceiling"), d.width_ceiling)?,
        sweep,
        ..d
    })
}

// ---------------------------------------------------------------- represent

pub(super) struct Represent {
    spec: EnsembleSpec,
    verify: VerifyParams,
    pairs: usize,
    conv_tol: f64,
    table: TableSpec,
    fitzpatrick_linear: bool,
}

impl Represent {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        let d = VerifyParams::default();
        Ok(Represent {
            spec: ensemble_spec(cfg)?,
            verify: VerifyParams {
                samples: cfg.positive_count("represent.samples", 10_000)?,
                seed: cfg.or("represent.seed", d.seed)?,
                radius: cfg.positive("represent.radius", d.radius)?,
                eq_tol: cfg.positive("represent.eq_tol", d.eq_tol)?,
                graph_tol: cfg.positive("represent.graph_tol", d.graph_tol)?,
                dual_samples: cfg.or("represent.dual_samples", d.dual_samples)?,
                k0_grid: 0,
            },
            pairs: cfg.positive_count("represent.pairs", 1000)?,
            conv_tol: cfg.positive("represent.conv_tol", 1e-8)?,
            table: TableSpec { bound: cfg.positive("represent.table_bound", 2.0)?, points: cfg.positive_count("represent.table_points", 7)? },
            fitzpatrick_linear: cfg.boolean("represent.fitzpatrick_linear", false)?,
        })
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("represent");
        let lambda = self.spec.lambda;
        let big = 2.0 * lambda + 1.0;
        sum.note("lambda", lambda);
        sum.note("window Lambda = 2 lambda + 1", big);
        let mut csv = String::from(
            "phase,c,b,construction,samples,min_gap,max_graph_gap,shell,violations,pairs,conv_violations,conv_errors,lower_margin,upper_margin,selfdual_residual,tabulation_error\n",
        );
        for (k, ph) in distinct_phases(&self.spec).into_iter().enumerate() {
            let mut runs: Vec<&str> = Vec::new();
            if ph.is_linear() {
                runs.push("closed-form");
            }
            if !ph.is_linear() || self.fitzpatrick_linear {
                runs.push("fitzpatrick");
            }
            for how in runs {
                let tag = format!("phase{k}_{how}");
                let map = ph.monotone_map(lambda);
                let (rep, conv, resid) = if how == "closed-form" {
                    let f = make_linear_representative(2, &[ph.c, 0.0, 0.0, ph.c], &[0.0; 4])?;
                    let rep = verify_representation(&f, &map, self.verify);
                    (rep, convexity_window(&f, big, self.pairs, self.verify.radius, self.verify.seed, self.conv_tol), None)
                } else {
                    let fe = ExtendedRepresentative::new(map.clone(), FitzpatrickParams::for_lambda(lambda));
                    let f = selfdual_proximal_average(fe, lambda, ProximalParams::default());
                    let rep = verify_representation(&f, &map, self.verify);
                    let conv = convexity_window(&f, big, self.pairs, self.verify.radius, self.verify.seed, self.conv_tol);
                    let t = tabulate(&f, self.table).with_context(|| format!("tabulating phase {k}"))?;
                    t.write_hglf(std::io::BufWriter::new(std::fs::File::create(ctx.out.join(format!("{tag}.hglf")))?))?;
                    let (r, _) = selfduality_residual(&t)?;
                    (rep, conv, Some((r, t.tabulation_error())))
                };
                let _ = writeln!(
                    csv,
                    "{k},{},{},{how},{},{:e},{:e},{:e},{},{},{},{},{:e},{:e},{},{}",
                    ph.c,
                    ph.b,
                    rep.checked,
                    rep.min_gap,
                    rep.max_graph_gap,
                    rep.shell,
                    rep.violations.len(),
                    conv.pairs,
                    conv.violations,
                    conv.errors,
                    conv.lower_margin,
                    conv.upper_margin,
                    resid.map(|r| format!("{:e}", r.0)).unwrap_or_default(),
                    resid.map(|r| format!("{:e}", r.1)).unwrap_or_default(),
                );
                sum.at_most(&format!("{tag} F - p.q below zero (min gap)"), -rep.min_gap.min(0.0), self.verify.eq_tol);
                sum.at_most(&format!("{tag} representation violations (eq_tol {:e}, graph_tol {:e})", self.verify.eq_tol, self.verify.graph_tol), rep.violations.len() as f64, 0.0);
                sum.at_most(&format!("{tag} convexity violations beyond {:e}", self.conv_tol), (conv.violations + conv.errors) as f64, 0.0);
                if let Some((r, e)) = resid {
                    sum.at_most(&format!("{tag} self-duality residual (2 x tabulation error)"), r, 2.0 * e);
                }
            }
        }
        write(&ctx.out.join("represent.csv"), &csv)?;
        Ok(sum)
    }
}

// --------------------------------------------------------------- homogenize

pub(super) struct Homogenize {
    name: String,
    spec: EnsembleSpec,
    table: TableSpec,
    levels: Vec<u32>,
    samples: usize,
    point: ParamPoint,
    sweep: SweepParams,
    model: Option<ModelParams>,
    gap_ratio: f64,
}

impl Homogenize {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        let solver = solver_params(cfg)?;
        let levels: Vec<u32> = cfg.list_or("homogenize.levels", vec![1, 2, 3, 4])?;
        if levels.is_empty() || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cfg.reject("homogenize.levels", "levels must be strictly increasing"));
        }
        let samples = cfg.positive_count("homogenize.samples", 32)?;
        let v = cfg.array("homogenize.point", [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0])?;
        let point = ParamPoint { p: [v[0], v[1]], q: [v[2], v[3]], qstar: [v[4], v[5]], pstar: [v[6], v[7]] };
        let sweep = SweepParams {
            solver,
            trimmed: cfg.boolean("homogenize.trimmed", false)?,
            beta: cfg.positive("homogenize.beta", 1.0)?,
            seed_offset: 0,
            timing: cfg.boolean("homogenize.timing", false)?,
        };
        let top = *levels.last().unwrap();
        let model = if cfg.boolean("homogenize.model", true)? { Some(model_params(cfg, "homogenize", top, samples, sweep)?) } else { None };
        Ok(Homogenize {
            name: ensemble_name(cfg)?,
            spec: ensemble_spec(cfg)?,
            table: table_spec(cfg)?,
            levels,
            samples,
            point,
            sweep,
            model,
            gap_ratio: cfg.positive("homogenize.gap_ratio", 0.5)?,
        })
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("homogenize");
        let ens = build_ensemble(&self.name, self.spec.clone(), self.table)?;
        let sweep = SweepParams { seed_offset: ctx.seed_offset, ..self.sweep };
        let (curve, records) = scale_sweep(&ens, &self.levels, self.point, self.samples, sweep)?;
        curve.write_csv(&ctx.out.join(format!("curves_{}.csv", self.name)))?;
        let log = ctx.out.join(format!("solves_{}.csv", self.name));
        if log.exists() {
            std::fs::remove_file(&log)?;
        }
        append_records(&log, &records)?;
        if self.sweep.timing {
            sum.note("timing", "wall times recorded; solve log is not reproducible");
        }
        let viol: usize = curve.levels.iter().map(|l| l.trap_violations).sum();
        sum.at_most("samples violating mu <= pairing + mu0 beyond solver excess", viol as f64, 0.0);
        sum.at_most("monotonicity flags beyond 2 standard errors", curve.flags.len() as f64, 0.0);
        for f in &curve.flags {
            sum.note("flag", f);
        }
        let (first, last) = (&curve.levels[0], curve.levels.last().unwrap());
        if curve.levels.len() > 1 {
            sum.below(&format!("bracket gap ratio n={} / n={}", last.n, first.n), last.gap / first.gap, self.gap_ratio);
        }
        if let Ok(fit) = fit_curve(&curve) {
            sum.note("gap decay exponent alpha", format!("{:.4} (95% CI {:.4} .. {:.4})", fit.alpha, fit.alpha_ci.0, fit.alpha_ci.1));
        }
        if let Some(mp) = &self.model {
            let mp = ModelParams { sweep: SweepParams { seed_offset: ctx.seed_offset, ..mp.sweep }, ..mp.clone() };
            let model = estimate_model(&ens, &mp)?;
            model.write(&ctx.out.join(format!("model_{}", self.name)))?;
            model_checks(&model, &mut sum);
        }
        Ok(sum)
    }
}

fn model_checks(model: &HomogenizedModel, sum: &mut Summary) {
    let (dev, untrusted) = model.closure_deviation();
    sum.note("max |Fbar - closure| over the grid", format!("{dev:e}"));
    sum.note("untrusted closure nodes", untrusted);
    sum.at_most("closure excess over bracket width (tabulation error)", model.closure_excess(), model.tabulation_error);
    let c = model.fbar_checks;
    sum.at_most("Fbar below pairing", c.below_pairing as f64, 0.0);
    sum.at_most("Fbar midpoint window violations", c.midpoint_violations as f64, 0.0);
    sum.at_most("Fbar growth violations", c.growth_violations as f64, 0.0);
    sum.at_most("abar monotonicity violations", model.abar_monotone.violations as f64, 0.0);
    sum.note("abar consistency max |grad_q Fbar(p, abar p) - p|", format!("{:e}", model.abar_consistency));
    sum.note("max bracket width", format!("{:e}", model.max_width));
    sum.note("low confidence", model.low_confidence);
    for (p, a) in &model.abar {
        sum.note(&format!("abar({}, {})", p[0], p[1]), format!("({:.6}, {:.6})", a[0], a[1]));
    }
}

// ---------------------------------------------------------- dirichlet-error

pub(super) struct DirichletStudy {
    name: String,
    spec: EnsembleSpec,
    table: TableSpec,
    solver: SolverParams,
    levels: Vec<u32>,
    seeds: Vec<u64>,
    xi: [f64; 2],
    rhs: f64,
    r_cell: usize,
    shape: Shape,
    model: ModelParams,
    error_levels: Vec<u32>,
    error_samples: usize,
}

impl DirichletStudy {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        let solver = solver_params(cfg)?;
        let levels: Vec<u32> = cfg.list_or("dirichlet.levels", vec![2, 3, 4])?;
        if levels.len() < 3 || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cfg.reject("dirichlet.levels", "need at least 3 strictly increasing levels (R = 3^k)"));
        }
        let error_levels: Vec<u32> = cfg.list_or("dirichlet.error_levels", vec![1, 2, 3])?;
        if error_levels.is_empty() || error_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cfg.reject("dirichlet.error_levels", "levels must be strictly increasing"));
        }
        let xi = cfg.array("dirichlet.xi", [1.0, 0.0])?;
        let sweep = SweepParams { solver, ..SweepParams::default() };
        Ok(DirichletStudy {
            name: ensemble_name(cfg)?,
            spec: ensemble_spec(cfg)?,
            table: table_spec(cfg)?,
            solver,
            levels,
            seeds: cfg.seeds("dirichlet.seeds", 0..20)?,
            xi,
            rhs: cfg.or("dirichlet.rhs", 0.0)?,
            r_cell: cfg.positive_count("dirichlet.r_cell", 3)?,
            shape: shape_key(cfg, "dirichlet.shape", "box")?,
            model: model_params(cfg, "dirichlet", 4, 32, sweep)?,
            error_levels,
            error_samples: cfg.positive_count("dirichlet.error_samples", 16)?,
        })
    }

    fn problem(&self, radius: usize) -> anyhow::Result<DirichletProblem> {
        let mut pb = DirichletProblem::new(self.shape, radius, BoundaryData::Affine { xi: self.xi, c: 0.0 }, Rhs::Constant(self.rhs))?;
        pb.r_cell = self.r_cell;
        pb.k0 = self.spec.k0;
        Ok(pb)
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("dirichlet-error");
        let ens = build_ensemble(&self.name, self.spec.clone(), self.table)?;
        let mp = ModelParams { sweep: SweepParams { seed_offset: ctx.seed_offset, ..self.model.sweep }, ..self.model.clone() };
        let model = estimate_model(&ens, &mp)?;
        model.write(&ctx.out.join(format!("model_{}", self.name)))?;
        let seeds = seeds_with_offset(&self.seeds, ctx);
        let homog = self
            .levels
            .par_iter()
            .map(|&k| {
                let pb = self.problem(3usize.pow(k))?;
                Ok(solve_homogenized(&model, &pb)?.u)
            })
            .collect::<anyhow::Result<Vec<GridField>>>()?;
        let jobs: Vec<(usize, u64)> = (0..self.levels.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
        let errors = jobs
            .par_iter()
            .map(|&(i, seed)| {
                let r = 3usize.pow(self.levels[i]);
                let pb = self.problem(r)?;
                let medium = medium_around(&ens, r, seed)?;
                let u = solve_heterogeneous(&medium, &pb)?.u;
                Ok(homogenization_error(&u, &homog[i], &pb)?)
            })
            .collect::<anyhow::Result<Vec<f64>>>()?;
        let mut csv = String::from("ensemble,seed,k,R,error\n");
        let mut obs = Vec::new();
        let mut tail = Vec::new();
        for (&(i, seed), &e) in jobs.iter().zip(&errors) {
            let k = self.levels[i];
            let _ = writeln!(csv, "{},{seed},{k},{},{e:.12e}", self.name, 3usize.pow(k));
            obs.push((k, e));
            if i + 1 == self.levels.len() {
                tail.push(e);
            }
        }
        write(&ctx.out.join(format!("homogenization_error_{}.csv", self.name)), &csv)?;
        for (i, &k) in self.levels.iter().enumerate() {
            let v: Vec<f64> = jobs.iter().zip(&errors).filter(|(j, _)| j.0 == i).map(|(_, e)| *e).collect();
            sum.note(&format!("median error R={}", 3usize.pow(k)), format!("{:e}", median(&v)));
        }
        let fit = fit_rate(&obs, &tail)?;
        write(
            &ctx.out.join(format!("rate_{}.csv", self.name)),
            &format!(
                "alpha,alpha_se,ci_low,ci_high,residual,s_hat\n{:e},{:e},{:e},{:e},{:e},{}\n",
                fit.alpha,
                fit.alpha_se,
                fit.alpha_ci.0,
                fit.alpha_ci.1,
                fit.residual,
                fit.s_hat.map(|s| format!("{s:e}")).unwrap_or_default()
            ),
        )?;
        sum.above("error decay rate: lower end of 95% interval", fit.alpha_ci.0, 0.0);

        let q = model.abar(self.xi)?;
        let ejobs: Vec<(u32, usize)> = self.error_levels.iter().flat_map(|&n| (0..self.error_samples).map(move |k| (n, k))).collect();
        let evals = ejobs
            .par_iter()
            .map(|&(n, k)| {
                let seed = sample_seed(n, k, ctx.seed_offset);
                let medium = ens.medium(n, seed)?;
                let cube = TriadicCube::new(2, n, false, 1.0)?;
                Ok((seed, error_e(&medium, &cube, self.xi, q, &model.fbar, &self.solver)?))
            })
            .collect::<anyhow::Result<Vec<(u64, f64)>>>()?;
        let mut csv = String::from("ensemble,n,sample,seed,p1,p2,q1,q2,error_e\n");
        for (&(n, k), &(seed, e)) in ejobs.iter().zip(&evals) {
            let _ = writeln!(csv, "{},{n},{k},{seed},{},{},{:e},{:e},{e:.12e}", self.name, self.xi[0], self.xi[1], q[0], q[1]);
        }
        write(&ctx.out.join(format!("error_e_{}.csv", self.name)), &csv)?;
        let med = |n: u32| median(&ejobs.iter().zip(&evals).filter(|(j, _)| j.0 == n).map(|(_, e)| e.1).collect::<Vec<_>>());
        let (n0, n1) = (self.error_levels[0], *self.error_levels.last().unwrap());
        sum.below(&format!("median E at n={n1} relative to n={n0}"), med(n1), med(n0));
        Ok(sum)
    }
}

// ----------------------------------------------------------------- lipschitz

pub(super) struct Lipschitz {
    name: String,
    spec: EnsembleSpec,
    table: TableSpec,
    radius: usize,
    seeds: Vec<u64>,
    xi: [f64; 2],
    rhs: f64,
    r_cell: usize,
    shape: Shape,
    params: RegularityParams,
    sigma: Option<f64>,
    sigma_candidates: Vec<f64>,
    calibration_radius: usize,
    r0_fraction: f64,
    pass_fraction: f64,
    homogenized_fraction: f64,
    control_c: f64,
    model: ModelParams,
}

impl Lipschitz {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        let d = RegularityParams::default();
        let solver = solver_params(cfg)?;
        let sweep = SweepParams { solver, ..SweepParams::default() };
        Ok(Lipschitz {
            name: ensemble_name(cfg)?,
            spec: ensemble_spec(cfg)?,
            table: table_spec(cfg)?,
            radius: cfg.positive_count("lipschitz.radius", 81)?,
            seeds: cfg.seeds("lipschitz.seeds", 0..40)?,
            xi: cfg.array("lipschitz.xi", [1.0, 0.0])?,
            rhs: cfg.or("lipschitz.rhs", 0.0)?,
            r_cell: cfg.positive_count("lipschitz.r_cell", 3)?,
            shape: shape_key(cfg, "lipschitz.shape", "ball")?,
            params: RegularityParams {
                radii: cfg.list("lipschitz.radii")?,
                c_lip: cfg.positive("lipschitz.c_lip", d.c_lip)?,
                c_curve: cfg.list_or("lipschitz.c_curve", d.c_curve)?,
                sigma: d.sigma,
                p_exp: cfg.positive("lipschitz.p_exp", d.p_exp)?,
                deltas: cfg.list_or("lipschitz.deltas", d.deltas)?,
                interior_fraction: cfg.positive("lipschitz.interior_fraction", d.interior_fraction)?,
                caccioppoli_bound: cfg.positive("lipschitz.caccioppoli_bound", d.caccioppoli_bound)?,
            },
            sigma: cfg.get("lipschitz.sigma")?,
            sigma_candidates: cfg.list_or("lipschitz.sigma_candidates", vec![0.5, 0.45, 0.4, 0.35, 0.3, 0.25, 0.2])?,
            calibration_radius: cfg.positive_count("lipschitz.calibration_radius", 27)?,
            r0_fraction: cfg.positive("lipschitz.r0_fraction", 0.25)?,
            pass_fraction: cfg.positive("lipschitz.pass_fraction", 0.95)?,
            homogenized_fraction: cfg.positive("lipschitz.homogenized_fraction", 0.9)?,
            control_c: cfg.positive("lipschitz.control_c", 1.0)?,
            model: model_params(cfg, "lipschitz", 3, 16, sweep)?,
        })
    }

    fn problem(&self) -> anyhow::Result<DirichletProblem> {
        let mut pb = DirichletProblem::new(self.shape, self.radius, BoundaryData::Affine { xi: self.xi, c: 0.0 }, Rhs::Constant(self.rhs))?;
        pb.r_cell = self.r_cell;
        pb.k0 = self.spec.k0;
        Ok(pb)
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("lipschitz");
        let sigma = match self.sigma {
            Some(s) => s,
            None => {
                let s = calibrate_sigma(&self.sigma_candidates, self.calibration_radius, self.r_cell)?;
                sum.note("sigma calibrated on the constant-coefficient Poisson ball of radius", self.calibration_radius);
                s
            }
        };
        let params = RegularityParams { sigma, ..self.params.clone() };
        sum.note("C_lip", params.c_lip);
        sum.note("sigma", sigma);
        sum.note("p_exp", params.p_exp);
        let ens = build_ensemble(&self.name, self.spec.clone(), self.table)?;
        let pb = self.problem()?;
        let mp = ModelParams { sweep: SweepParams { seed_offset: ctx.seed_offset, ..self.model.sweep }, ..self.model.clone() };
        let model = estimate_model(&ens, &mp)?;
        let ubar = solve_homogenized(&model, &pb)?.u;
        let seeds = seeds_with_offset(&self.seeds, ctx);
        let dir = ctx.out.join("regularity");
        let reports = seeds
            .par_iter()
            .map(|&seed| {
                let medium = medium_around(&ens, self.radius, seed)?;
                let u = solve_heterogeneous(&medium, &pb)?.u;
                let rep = RegularityReport::build(&self.name, seed, &u, &pb, &params, Some(&ubar))?;
                rep.write_csv(&dir)?;
                Ok(rep)
            })
            .collect::<anyhow::Result<Vec<RegularityReport>>>()?;
        let mut csv = format!("{}\n", RegularityReport::SUMMARY_HEADER);
        let mut curve = String::from("ensemble,seed,C,r0\n");
        for r in &reports {
            csv.push_str(&r.summary_line());
            csv.push('\n');
            for (c, r0) in &r.r0_curve {
                let _ = writeln!(curve, "{},{},{c},{}", r.ensemble, r.seed, r0.map(|x| x.to_string()).unwrap_or_default());
            }
        }
        write(&ctx.out.join(format!("lipschitz_{}.csv", self.name)), &csv)?;
        write(&ctx.out.join(format!("r0_curve_{}.csv", self.name)), &curve)?;

        let limit = self.r0_fraction * self.radius as f64;
        let good = reports.iter().filter(|r| r.r0.is_some_and(|x| x <= limit)).count();
        sum.note("r0 limit (r0_fraction x R)", limit);
        sum.at_least("fraction of seeds with r0 <= r0_fraction x R", good as f64 / reports.len() as f64, self.pass_fraction);
        let bounded = reports.iter().filter(|r| r.profile_bounded_above_r0()).count();
        sum.at_least("fraction of seeds with profile <= C_lip M^2 above r0", bounded as f64 / reports.len() as f64, 1.0);
        let cacc: Vec<f64> = reports.iter().map(|r| r.interior.caccioppoli).collect();
        sum.at_most("seeds with Caccioppoli ratio above the bound", ratio_flags(&cacc, params.caccioppoli_bound).len() as f64, 0.0);
        sum.note("Caccioppoli bound", params.caccioppoli_bound);
        sum.note("max Caccioppoli ratio", format!("{:e}", cacc.iter().fold(0.0f64, |a, &b| a.max(b))));
        let camp = reports.iter().map(|r| r.campanato_fraction()).sum::<f64>() / reports.len() as f64;
        sum.note("mean Campanato fraction (heterogeneous)", format!("{camp:.4}"));

        let radii = params.radii.clone().unwrap_or_else(|| default_radii(pb.max_radius()));
        let h = 1.0 / self.r_cell as f64;
        let tested: Vec<f64> = radii.iter().copied().filter(|&r| sigma * r >= 2.0 * h).collect();
        let rows = campanato_check(&ubar, &pb, &tested, sigma)?;
        let frac = rows.iter().filter(|r| r.member).count() as f64 / rows.len().max(1) as f64;
        sum.at_least("homogenized Campanato fraction", frac, self.homogenized_fraction);

        let c = self.control_c;
        let ctrl = solve(&Coefficients::Constant([[c, 0.0], [0.0, c]]), &pb)?.u;
        let rep = RegularityReport::build("control", 0, &ctrl, &pb, &params, None)?;
        let smallest = rep.radii[0];
        sum.holds(&format!("constant control r0 = smallest radius {smallest}"), rep.r0 == Some(smallest));
        Ok(sum)
    }
}

// -------------------------------------------------------------- mixing-probe

pub(super) struct Mixing {
    spec: EnsembleSpec,
    name: String,
    distances: Vec<usize>,
    samples: usize,
    functional: CellFunctional,
    sigmas: f64,
}

impl Mixing {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        let functional = match cfg.str_or("mixing.functional", "indicator:0").as_str() {
            "scaled" => CellFunctional::ScaledCoefficient,
            s => match s.strip_prefix("indicator:").and_then(|k| k.trim().parse().ok()) {
                Some(k) => CellFunctional::PhaseIndicator(k),
                None => return Err(cfg.reject("mixing.functional", format!("expected indicator:K or scaled, got `{s}`"))),
            },
        };
        Ok(Mixing {
            spec: ensemble_spec(cfg)?,
            name: ensemble_name(cfg)?,
            distances: cfg.list_or("mixing.distances", vec![0, 1, 2, 3, 4, 6, 8])?,
            samples: cfg.positive_count("mixing.samples", 20_000)?,
            functional,
            sigmas: cfg.positive("mixing.sigmas", 3.0)?,
        })
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("mixing-probe");
        let rows = mixing_probe_from(&self.spec, self.functional, &self.distances, self.samples, ctx.seed_offset)?;
        let mut csv = String::from("distance,covariance,std_error,samples\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{:e},{:e},{}", r.distance, r.covariance, r.std_error, r.samples);
        }
        write(&ctx.out.join(format!("mixing_{}.csv", self.name)), &csv)?;
        sum.note("range", self.spec.range);
        sum.note("sigmas", self.sigmas);
        for r in &rows {
            if r.distance >= self.spec.range {
                sum.at_most(&format!("|cov| at distance {} (sigmas x std error)", r.distance), r.covariance.abs(), self.sigmas * r.std_error);
            } else if r.distance == 0 {
                match (&self.spec.kind, self.functional) {
                    (EnsembleKind::Checkerboard { weights, .. }, CellFunctional::PhaseIndicator(k)) if k < weights.len() => {
                        let oracle = weights[k] * (1.0 - weights[k]);
                        sum.note("Bernoulli variance w (1 - w)", oracle);
                        sum.at_most("|cov(0) - Bernoulli variance| (sigmas x std error)", (r.covariance - oracle).abs(), self.sigmas * r.std_error);
                    }
                    _ => sum.note("variance at distance 0", format!("{:e}", r.covariance)),
                }
            } else {
                sum.note(&format!("cov at distance {} (inside the range)", r.distance), format!("{:e}", r.covariance));
            }
        }
        Ok(sum)
    }
}

// --------------------------------------------------------------------- check

pub(super) struct Check {
    name: String,
    spec: EnsembleSpec,
    table: TableSpec,
    solver: SolverParams,
    samples: usize,
    pairs: usize,
    level: u32,
    seed: u64,
    radius: usize,
}

impl Check {
    fn read(cfg: &Config) -> Result<Self, ConfigError> {
        Ok(Check {
            name: ensemble_name(cfg)?,
            spec: ensemble_spec(cfg)?,
            table: table_spec(cfg)?,
            solver: solver_params(cfg)?,
            samples: cfg.positive_count("check.samples", 1000)?,
            pairs: cfg.positive_count("check.pairs", 200)?,
            level: cfg.or("check.level", 1)?,
            seed: cfg.or("check.seed", 0)?,
            radius: cfg.positive_count("check.radius", 4)?,
        })
    }

    fn run(&self, ctx: &Context) -> anyhow::Result<Summary> {
        let mut sum = Summary::new("check");
        let seed = self.seed + ctx.seed_offset;
        self.representation(&mut sum)?;
        grid_suite(&mut sum, seed)?;
        self.fields_suite(&mut sum, seed)?;
        let ens = build_ensemble(&self.name, self.spec.clone(), self.table)?;
        self.subadd_suite(&mut sum, &ens, seed)?;
        self.dirichlet_suite(&mut sum, &ens, seed)?;
        write(&ctx.out.join("check.txt"), &sum.text())?;
        Ok(sum)
    }

    fn representation(&self, sum: &mut Summary) -> anyhow::Result<()> {
        let lambda = self.spec.lambda;
        let big = 2.0 * lambda + 1.0;
        let vp = VerifyParams { samples: self.samples, ..VerifyParams::default() };
        for (k, ph) in distinct_phases(&self.spec).into_iter().enumerate() {
            let map = ph.monotone_map(lambda);
            let (rep, conv) = if ph.is_linear() {
                let f = make_linear_representative(2, &[ph.c, 0.0, 0.0, ph.c], &[0.0; 4])?;
                (verify_representation(&f, &map, vp), convexity_window(&f, big, self.pairs, 2.0, 3, 1e-8))
            } else {
                let fe = ExtendedRepresentative::new(map.clone(), FitzpatrickParams::for_lambda(lambda));
                let f = selfdual_proximal_average(fe, lambda, ProximalParams::default());
                (verify_representation(&f, &map, vp), convexity_window(&f, big, self.pairs, 2.0, 3, 1e-8))
            };
            sum.at_most(&format!("representation phase {k}: violations"), rep.violations.len() as f64, 0.0);
            sum.at_most(&format!("convexity window phase {k} (Lambda {big}): violations beyond 1e-8"), (conv.violations + conv.errors) as f64, 0.0);
        }
        Ok(())
    }

    fn fields_suite(&self, sum: &mut Summary, seed: u64) -> anyhow::Result<()> {
        let r = CellBox::new([-3, -2], [4, 5])?;
        let big = sample_field(&self.spec, CellBox::new([-30, -30], [30, 30])?, seed)?;
        let z = [7i64, -11i64];
        let moved = sample_field(&self.spec, r.translate(z), seed)?;
        let exact = r.cells().all(|c| {
            let t = [c[0] + z[0], c[1] + z[1]];
            moved.phase_at(t) == big.phase_at(t) && big.phase_at(t) == Some(cell_phase(&self.spec, seed, t))
        });
        sum.holds("fields: translated samples agree cell by cell", exact);
        Ok(())
    }

    fn subadd_suite(&self, sum: &mut Summary, ens: &Ensemble, seed: u64) -> anyhow::Result<()> {
        let n = self.level.max(1);
        let medium = ens.medium(n, seed)?;
        let cube = TriadicCube::new(2, n, false, 1.0)?;
        let (p, q) = pair([1.0, 0.5, 0.0, 0.0]);
        let (qs, ps) = pair([1.0, 0.0, 0.0, 0.5]);
        let rep = check_partition(&medium, &cube, p, q, qs, ps, &self.solver)?;
        sum.at_least("subadditivity of mu0 over children (>= -eps)", rep.sub_residual, -rep.eps);
        sum.at_least("superadditivity of mu over children (>= -eps)", rep.super_residual, -rep.eps);
        let (mu, a) = solve_mu(&medium, &cube, qs, ps, &self.solver)?;
        let (mu0, b) = solve_mu0(&medium, &cube, p, q, &self.solver)?;
        let pairing = p[0] * qs[0] + p[1] * qs[1] + ps[0] * q[0] + ps[1] * q[1];
        sum.at_most("mu - pairing - mu0 (<= solver excess)", mu - pairing - mu0, a.residual + b.residual);
        Ok(())
    }

    fn dirichlet_suite(&self, sum: &mut Summary, ens: &Ensemble, seed: u64) -> anyhow::Result<()> {
        let r = self.radius;
        let id = [[1.0, 0.0], [0.0, 1.0]];
        for shape in [Shape::Box, Shape::Ball] {
            let pb = DirichletProblem::new(shape, r, BoundaryData::Affine { xi: [0.7, -0.2], c: 0.1 }, Rhs::Constant(0.0))?;
            let s = solve(&Coefficients::Constant(id), &pb)?;
            let exact = pb.boundary_field();
            let err = s.u.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            sum.at_most(&format!("affine data reproduced ({shape:?})"), err, 1e-9);
        }
        let pe = paraboloid_error(27)?;
        sum.below("Poisson paraboloid relative L2 error at R=27", pe, 0.01);

        let pb = DirichletProblem::new(Shape::Box, r, BoundaryData::Affine { xi: [1.0, 0.5], c: 0.0 }, Rhs::Constant(0.3))?;
        let medium = medium_around(ens, r, seed)?;
        let het = solve_heterogeneous(&medium, &pb)?;
        if let Some(j) = het.null_value {
            sum.at_most("flux consistency avg(F(grad u, g) - grad u . g)", j, 1e-6);
        }
        let cst = solve(&Coefficients::Constant(id), &pb)?;
        let e1 = homogenization_error(&het.u, &cst.u, &pb)?;
        let e2 = homogenization_error(&cst.u, &het.u, &pb)?;
        sum.holds("homogenization error symmetric and nonnegative", e1 == e2 && e1 >= 0.0);
        let avg = unit_cell_averages(&het.u, &pb)?;
        sum.holds("unit-cell averages keep the mean and do not increase the L2 norm", avg.holds(1e-10));
        if self.spec.is_linear() {
            let lin = |t: f64| -> anyhow::Result<f64> {
                let pb = DirichletProblem::new(Shape::Box, r, BoundaryData::Affine { xi: [t, 0.5 * t], c: 0.0 }, Rhs::Constant(0.0))?;
                let u = solve_heterogeneous(&medium, &pb)?.u;
                Ok(crate::dirichlet::lipschitz_profile(&u, &pb, &[pb.max_radius()])?[0])
            };
            let (a, b) = (lin(1.0)?, lin(2.0)?);
            sum.at_most("profile scales as t^2 (relative deviation)", (b / (4.0 * a) - 1.0).abs(), 1e-6);
        }
        Ok(())
    }
}

/// Relative L2 error of the ball Poisson solve against `(R^2 - |x|^2) / 4`.
pub(crate) fn paraboloid_error(radius: usize) -> anyhow::Result<f64> {
    let pb = DirichletProblem::new(Shape::Ball, radius, BoundaryData::Affine { xi: [0.0; 2], c: 0.0 }, Rhs::Constant(1.0))?;
    let s = solve(&Coefficients::Constant([[1.0, 0.0], [0.0, 1.0]]), &pb)?;
    let grid = pb.grid();
    let r2 = (radius * radius) as f64;
    let exact = GridField::from_fn(grid, Boundary::Free, |x, y| 0.25 * (r2 - x * x - y * y));
    let dom = pb.domain_cells();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            if !dom[grid.cell(i, j)] {
                continue;
            }
            let nodes = [grid.node(i, j), grid.node(i + 1, j), grid.node(i, j + 1), grid.node(i + 1, j + 1)];
            num += nodes.iter().map(|&k| (s.u.values[k] - exact.values[k]).powi(2)).sum::<f64>();
            den += nodes.iter().map(|&k| exact.values[k].powi(2)).sum::<f64>();
        }
    }
    Ok((num / den).sqrt())
}

fn grid_suite(sum: &mut Summary, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid2::new([0.0, 0.0], 0.25, 12, 9)?;
    let mut u = GridField::from_fn(grid, Boundary::Zero, |_, _| 0.0);
    for i in 1..grid.nx {
        for j in 1..grid.ny {
            u.values[grid.node(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let mut g = GridField::zeros(grid, Location::Cell, 2, Boundary::Free);
    g.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    sum.at_most("grid: |<grad u, g> + <u, div g>| for zero-boundary u", adjointness_residual(&u, &g)?.abs(), 1e-12);

    let map = solenoidal_param(&[0.0, 0.0], &[4.0, 3.0], 3, true)?;
    let mut psi = GridField::from_fn(map.grid, Boundary::Zero, |_, _| 0.0);
    for i in 1..map.grid.nx {
        for j in 1..map.grid.ny {
            psi.values[map.grid.node(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let s = map.apply(&psi)?;
    let dv = discrete_divergence(&s)?;
    sum.at_most("grid: max |div| of a zero-normal stream image", dv.values.iter().fold(0.0f64, |a, b| a.max(b.abs())), 1e-12);

    let shape = vec![16usize, 12];
    let mut f = PeriodicField::zeros(shape, 0.125);
    for c in f.comps.iter_mut() {
        c.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let parts = helmholtz_project(&f)?;
    let sol = parts.solenoidal();
    let scale = f.norm() * f.norm();
    sum.at_most("Helmholtz: |<gradient, solenoidal>| / |f|^2", parts.gradient.inner(&sol).abs() / scale, 1e-10);
    let rec = parts.reconstruct();
    let mut diff = 0.0f64;
    for (a, b) in rec.comps.iter().zip(&f.comps) {
        for (x, y) in a.iter().zip(b) {
            diff = diff.max((x - y).abs());
        }
    }
    let fmax = f.comps.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    sum.at_most("Helmholtz: reconstruction error / max |f|", diff / fmax, 1e-10);
    let div = spectral_divergence(&sol).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    sum.at_most("Helmholtz: max |div solenoidal| / max |f|", div / fmax, 1e-10);
    Ok(())
}

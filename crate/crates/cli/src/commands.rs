//! Subcommands. Each loads and validates the config, runs its experiment,
//! and writes CSV records, a JSON summary and SVG plots plus a manifest
//! into `<out>/<command>/`.

use std::path::{Path, PathBuf};

use homoglab::gffref::{Family, TestFunctional};
use homoglab::homog::AhomEstimate;
use homoglab::solve::CorrectorCache;
use homoglab::stats::seed_range;
use homoglab::{build_corrector_set, sample_field, SamplerSpec};
use nalgebra::DMatrix;
use serde_json::json;

use crate::analysis::{self, CriterionReport, Outcome, Status, View};
use crate::config::{ConfigError, ExperimentConfig};
use crate::ensemble::{directional_corrector, ProbeSpec, Prober, SampleRecord};
use crate::output::{OutputDir, Table};
use crate::svg;

pub const CACHE_ENV: &str = "HOMOGLAB_CACHE";
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Infra(String),
    #[error("acceptance thresholds failed: {}", .0.join(", "))]
    Threshold(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infra(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl From<homoglab::Error> for CliError {
    fn from(e: homoglab::Error) -> Self {
        CliError::Infra(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Infra(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Field,
    Corrector,
    Jscan,
    Fluct,
    Additivity,
    Localize,
    Homog,
    Gff,
    Check,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Field => "field",
            Command::Corrector => "corrector",
            Command::Jscan => "jscan",
            Command::Fluct => "fluct",
            Command::Additivity => "additivity",
            Command::Localize => "localize",
            Command::Homog => "homog",
            Command::Gff => "gff",
            Command::Check => "check",
            Command::Report => "report",
        }
    }
}

/// Command-line overrides of the config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed_base: Option<u64>,
    pub overwrite: bool,
}

/// Loaded config with overrides applied, and the derived handles.
pub struct Context {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out_root: PathBuf,
    pub overwrite: bool,
    pub cache: Option<CorrectorCache>,
}

impl Context {
    pub fn load(path: &Path, o: &Overrides) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::load(path)?;
        if let Some(w) = o.workers {
            config.output.workers = w;
        }
        if let Some(b) = o.seed_base {
            config.seeds.base = b;
        }
        if let Some(out) = &o.out {
            config.output.dir = out.clone();
        }
        config.validate()?;
        let cache = std::env::var_os(CACHE_ENV).map(CorrectorCache::new);
        Ok(Self::from_config(config, cache, o.overwrite))
    }

    pub fn from_config(config: ExperimentConfig, cache: Option<CorrectorCache>, overwrite: bool) -> Self {
        // the output location and worker count do not change results
        let mut hashed = config.clone();
        hashed.output = Default::default();
        Self {
            hash: hashed.canonical_hash(),
            out_root: config.output.dir.clone(),
            config,
            overwrite,
            cache,
        }
    }

    fn workers(&self) -> usize {
        self.config.output.workers
    }

    fn seeds(&self) -> Vec<u64> {
        seed_range(self.config.seeds.base, self.config.seeds.count)
    }

    fn out(&self, cmd: Command) -> Result<OutputDir, CliError> {
        Ok(OutputDir::create(&self.out_root.join(cmd.name()), cmd.name(), &self.hash, self.overwrite)?)
    }

    fn base_probe(&self, mask_abar: DMatrix<f64>) -> Result<ProbeSpec, CliError> {
        let c = &self.config;
        let mut p = ProbeSpec::ahom_only(c.sampler.clone(), c.grid_spec()?, c.solver_options());
        p.mask_abar = mask_abar;
        p.boundary = c.masks.boundary;
        p.radii = c.masks.radii.clone();
        p.direction = c.directions.e[0].clone();
        Ok(p)
    }

    /// Mask shape: the configured matrix, or the mean torus `ā` of the
    /// pilot seeds.
    pub fn mask_abar(&self) -> Result<(DMatrix<f64>, Option<AhomEstimate>), CliError> {
        if let Some(m) = self.config.mask_abar() {
            return Ok((m, None));
        }
        let c = &self.config;
        let probe = ProbeSpec::ahom_only(c.sampler.clone(), c.grid_spec()?, c.solver_options());
        let prober = Prober::new(probe, self.cache.clone())?;
        let n = c.masks.pilot_seeds.min(c.seeds.count).max(2);
        let records = prober.run(&seed_range(c.seeds.base, n), self.workers())?;
        let torus: Vec<DMatrix<f64>> = records.values().map(|r| r.torus_abar.clone()).collect();
        let est = AhomEstimate::from_samples(&torus)?;
        log::info!("pilot abar from {} seeds: {}", est.n_samples, est.abar);
        Ok((est.abar.clone(), Some(est)))
    }

    fn pq(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.config.directions.pq.iter().map(|[p, q]| (p.clone(), q.clone())).collect()
    }
}

fn run_probe(ctx: &Context, probe: ProbeSpec) -> Result<(Prober, Vec<SampleRecord>), CliError> {
    let prober = Prober::new(probe, ctx.cache.clone())?;
    let ens = prober.run(&ctx.seeds(), ctx.workers())?;
    if !ens.failures.is_empty() {
        log::warn!("{} seeds failed and were dropped", ens.failures.len());
    }
    let records: Vec<SampleRecord> = ens.values().cloned().collect();
    if records.iter().any(|r| !r.converged) {
        log::warn!("some corrector solves stopped before the tolerance; see the records CSV");
    }
    Ok((prober, records))
}

/// Writes every outcome and the combined summary; returns the reports.
fn write_outcomes(out: &mut OutputDir, outcomes: &[Outcome], extra: serde_json::Value) -> Result<Vec<CriterionReport>, CliError> {
    for o in outcomes {
        for (name, t) in &o.tables {
            out.write_csv(name, t)?;
        }
        for (name, s) in &o.plots {
            out.write_text(name, s)?;
        }
    }
    let reports: Vec<CriterionReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let summary = json!({
        "config_hash": out.config_hash(),
        "criteria": reports,
        "details": outcomes.iter().map(|o| o.summary.clone()).collect::<Vec<_>>(),
        "extra": extra,
        "failed": reports.iter().any(|r| r.failed()),
    });
    out.write_json(SUMMARY, &summary)?;
    Ok(reports)
}

fn verdict(reports: &[CriterionReport]) -> Result<(), CliError> {
    for r in reports {
        log::info!("{}", r.line());
    }
    let failed: Vec<String> = reports.iter().filter(|r| r.failed()).map(|r| format!("criterion {}", r.id)).collect();
    if failed.is_empty() { Ok(()) } else { Err(CliError::Threshold(failed)) }
}

pub fn run(cmd: Command, config: &Path, o: &Overrides) -> Result<(), CliError> {
    if cmd == Command::Report {
        let root = match &o.out {
            Some(out) => out.clone(),
            None => ExperimentConfig::load(config)?.output.dir,
        };
        return report(&root, o.overwrite);
    }
    let ctx = Context::load(config, o)?;
    execute(cmd, &ctx)
}

pub fn execute(cmd: Command, ctx: &Context) -> Result<(), CliError> {
    log::info!("{} with config {}", cmd.name(), ctx.hash);
    match cmd {
        Command::Field => field(ctx),
        Command::Corrector => corrector(ctx),
        Command::Jscan => jscan(ctx),
        Command::Fluct => fluct(ctx),
        Command::Additivity => additivity(ctx),
        Command::Localize => localize(ctx),
        Command::Homog => homog(ctx),
        Command::Gff => gff(ctx),
        Command::Check => check(ctx),
        Command::Report => report(&ctx.out_root, ctx.overwrite),
    }
}

fn finish(out: OutputDir) -> Result<(), CliError> {
    let m = out.finish()?;
    log::info!("wrote {} files", m.files.len());
    Ok(())
}

fn field(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let grid = c.grid_spec()?;
    let seed = c.seeds.base;
    let a = sample_field(&c.sampler, &grid, seed)?;
    let mut out = ctx.out(Command::Field)?;
    let mut bytes = Vec::new();
    a.write_to(&mut bytes)?;
    out.write_bytes("field.bin", &bytes)?;
    let mut t = Table::new(&["site", "a11"]);
    for (i, v) in a.entry_plane(0, 0).iter().enumerate() {
        t.push(vec![i.into(), (*v).into()]);
    }
    out.write_csv("a11.csv", &t)?;
    if grid.dim() == 2 {
        let n = grid.points_per_axis();
        out.write_text("a11.svg", &svg::heatmap("a_11", n, a.entry_plane(0, 0), 256))?;
    }
    let mean = a.mean_matrix();
    out.write_json(
        SUMMARY,
        &json!({ "seed": seed, "mean_matrix": mean, "lambda_max": a.lambda_max(), "failed": false }),
    )?;
    finish(out)
}

fn corrector(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let grid = c.grid_spec()?;
    let seed = c.seeds.base;
    let opts = c.solver_options();
    let a = sample_field(&c.sampler, &grid, seed)?;
    let cached = ctx.cache.as_ref().and_then(|cache| cache.load(&c.sampler, &grid, seed, opts.tol));
    let set = match cached {
        Some(set) => {
            log::info!("cache hit for seed {seed}");
            set
        }
        None => {
            let set = build_corrector_set(&a, &opts)?;
            for (i, r) in set.reports().iter().enumerate() {
                log::info!("solved direction {i}: {} iterations, residual {:.2e}", r.iterations, r.relative_residual);
            }
            if let Some(cache) = &ctx.cache {
                if set.converged() {
                    cache.store(&c.sampler, &grid, seed, opts.tol, &set)?;
                }
            }
            set
        }
    };
    if !set.converged() {
        return Err(CliError::Infra(format!("corrector solve for seed {seed} did not converge")));
    }
    let mut out = ctx.out(Command::Corrector)?;
    let radii: Vec<f64> = match &c.oscillation {
        Some(o) => o.radii.clone(),
        None => c.masks.radii.clone(),
    };
    out.write_csv("corrector.csv", &analysis::corrector_table(&set, &radii)?)?;
    let d = grid.dim();
    let mut ranges = Vec::new();
    for i in 0..d {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        let phi = directional_corrector(&set, &e);
        let (lo, hi) = phi.values().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        ranges.push(hi - lo);
        if d == 2 {
            let n = grid.points_per_axis();
            out.write_text(&format!("phi_e{}.svg", i + 1), &svg::heatmap(&format!("phi_e{}", i + 1), n, phi.values(), 256))?;
        }
    }
    out.write_json(
        SUMMARY,
        &json!({
            "seed": seed,
            // wall time stays out so reruns and cache hits match byte for byte
            "reports": set.reports().iter().map(|r| json!({
                "iterations": r.iterations,
                "relative_residual": r.relative_residual,
                "converged": r.converged,
            })).collect::<Vec<_>>(),
            "corrector_range": ranges,
            "failed": false,
        }),
    )?;
    finish(out)
}

fn jscan(ctx: &Context) -> Result<(), CliError> {
    let (abar, pilot) = ctx.mask_abar()?;
    let probe = ctx.base_probe(abar)?;
    let (prober, records) = run_probe(ctx, probe)?;
    let view = View::new(&prober, &records)?;
    let pairs = ctx.pq();
    let mut out = ctx.out(Command::Jscan)?;
    out.write_csv("jscan.csv", &analysis::jscan_table(&view, &pairs)?)?;
    out.write_csv("records.csv", &analysis::records_table(&records))?;
    let mut stats = Vec::new();
    for (p, q) in &pairs {
        for (k, &r) in view.radii().iter().enumerate() {
            let j = view.j_hat(0, k, p, q)?;
            stats.push(json!({ "p": p, "q": q, "r": r, "mean_jhat": homoglab::stats::mean(&j), "std_jhat": homoglab::stats::variance(&j).sqrt() }));
        }
    }
    out.write_json(SUMMARY, &json!({ "abar": view.ahom, "pilot": pilot, "jhat": stats, "failed": false }))?;
    finish(out)
}

fn fluct(ctx: &Context) -> Result<(), CliError> {
    if ctx.config.masks.radii.len() < 3 {
        return Err(ConfigError::Invalid("fluct fits scaling exponents and needs at least 3 mask radii".into()).into());
    }
    let (abar, pilot) = ctx.mask_abar()?;
    let mut probe = ctx.base_probe(abar)?;
    if let Some(o) = &ctx.config.oscillation {
        probe.oscillation_radii = o.radii.clone();
    }
    let (prober, records) = run_probe(ctx, probe)?;
    let view = View::new(&prober, &records)?;
    let (p, q) = ctx.pq().remove(0);
    let mut outcomes = vec![analysis::clt(&view, &p, &q)?];
    let degenerate = outcomes[0].report.status == Status::Degenerate;
    if !degenerate {
        outcomes.push(analysis::duality(&view)?);
        let r_max = view.radii().iter().copied().fold(0.0, f64::max);
        outcomes.push(analysis::gaussian(&view, r_max, &p, &q)?);
        if ctx.config.oscillation.is_some() {
            outcomes.push(analysis::oscillation(&view)?);
        }
    }
    let mut out = ctx.out(Command::Fluct)?;
    out.write_csv("records.csv", &analysis::records_table(&records))?;
    let reports = write_outcomes(&mut out, &outcomes, json!({ "pilot": pilot }))?;
    finish(out)?;
    verdict(&reports)
}

fn additivity(ctx: &Context) -> Result<(), CliError> {
    let Some(a) = &ctx.config.additivity else {
        return Err(ConfigError::Invalid("additivity needs an [additivity] section".into()).into());
    };
    let (abar, pilot) = ctx.mask_abar()?;
    let mut probe = ctx.base_probe(abar)?;
    probe.radii.clear();
    probe.additivity_radii = a.radii.clone();
    probe.additivity_ratio = a.ratio;
    let (prober, records) = run_probe(ctx, probe)?;
    let view = View::new(&prober, &records)?;
    let (p, q) = ctx.pq().remove(0);
    let outcome = analysis::additivity(&view, &p, &q)?;
    let mut out = ctx.out(Command::Additivity)?;
    let reports = write_outcomes(&mut out, &[outcome], json!({ "pilot": pilot, "abar": view.ahom }))?;
    finish(out)?;
    verdict(&reports)
}

fn localize(ctx: &Context) -> Result<(), CliError> {
    let Some(l) = &ctx.config.localization else {
        return Err(ConfigError::Invalid("localize needs a [localization] section".into()).into());
    };
    let (abar, pilot) = ctx.mask_abar()?;
    let c = &ctx.config;
    let (p, q) = ctx.pq().remove(0);
    let records = analysis::localization_records(
        &c.sampler,
        c.grid_spec()?,
        &c.solver_options(),
        &abar,
        c.masks.boundary,
        &ctx.seeds(),
        l.radius,
        l.delta,
        &p,
        &q,
        ctx.workers(),
    )?;
    let outcome = analysis::localization(&records, l.radius, l.delta)?;
    let mut out = ctx.out(Command::Localize)?;
    let reports = write_outcomes(&mut out, &[outcome], json!({ "pilot": pilot, "abar": abar }))?;
    finish(out)?;
    verdict(&reports)
}

fn homog(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let refinements = c.homog.as_ref().map(|h| h.refinements.clone()).unwrap_or_else(|| vec![c.grid.cells_per_unit]);
    let rows = analysis::refine_ahom(&c.sampler, c.grid.dim, c.grid.side, &refinements, &ctx.seeds(), &c.solver_options(), ctx.workers())?;
    let laminate = match c.sampler {
        SamplerSpec::CheckerboardTwoPhase { a1, a2 } => {
            let grid = homoglab::GridSpec::new(c.grid.dim, c.grid.cells_per_unit, c.grid.side.min(32))?;
            Some(analysis::laminate_deviation(a1, a2, grid, &seed_range(c.seeds.base, 4), &c.solver_options())?)
        }
        _ => None,
    };
    let reference = analysis::reference_abar(&c.sampler, c.grid.dim);
    let outcome = analysis::homog_outcome(&rows, reference.as_ref(), laminate);
    let mut out = ctx.out(Command::Homog)?;
    let reports = write_outcomes(&mut out, &[outcome], json!({}))?;
    finish(out)?;
    verdict(&reports)
}

/// Test functionals of the covariance experiment, centered at the origin.
pub fn gff_functionals(dim: usize, width: f64) -> Vec<TestFunctional> {
    let origin = vec![0.0; dim];
    [Family::BumpGradient, Family::DipoleGradient, Family::Swirl]
        .into_iter()
        .map(|f| TestFunctional::new(f, width, &origin))
        .collect()
}

fn gff(ctx: &Context) -> Result<(), CliError> {
    let Some(g) = &ctx.config.gff else {
        return Err(ConfigError::Invalid("gff needs a [gff] section".into()).into());
    };
    let r_cal = ctx.config.r_cal().expect("gff section present");
    let (abar, pilot) = ctx.mask_abar()?;
    let mut probe = ctx.base_probe(abar)?;
    probe.radii = vec![r_cal, 2.0 * r_cal];
    let eps = ctx.config.masks.perturbation;
    probe.mask_scales = if eps > 0.0 { vec![1.0, 1.0 - eps, 1.0 + eps] } else { vec![1.0] };
    probe.functionals = gff_functionals(ctx.config.grid.dim, g.width);
    probe.functional_radius = g.radius.unwrap_or(r_cal);
    let (prober, records) = run_probe(ctx, probe)?;
    let view = View::new(&prober, &records)?;
    let outcome = analysis::gff(&view, r_cal)?;
    let mut out = ctx.out(Command::Gff)?;
    let reports = write_outcomes(&mut out, &[outcome], json!({ "pilot": pilot, "abar": view.ahom }))?;
    finish(out)?;
    verdict(&reports)
}

/// Records of a small probe with the config's law, rendered as CSV, for a
/// worker count.
pub fn determinism_sample(spec: &SamplerSpec, dim: usize, workers: usize) -> Result<String, CliError> {
    let grid = homoglab::GridSpec::new(dim, 2, 16)?;
    let mut probe = ProbeSpec::ahom_only(spec.clone(), grid, Default::default());
    probe.mask_abar = DMatrix::identity(dim, dim) * 2.0;
    probe.radii = vec![1.0, 2.0];
    probe.additivity_radii = vec![1.0];
    probe.oscillation_radii = vec![2.0];
    let prober = Prober::new(probe, None)?;
    let records: Vec<SampleRecord> = prober.run(&seed_range(0, 6), workers)?.values().cloned().collect();
    Ok(analysis::records_table(&records).render())
}

fn check(ctx: &Context) -> Result<(), CliError> {
    let c = &ctx.config;
    let a = determinism_sample(&c.sampler, c.grid.dim, 1)?;
    let b = determinism_sample(&c.sampler, c.grid.dim, ctx.workers().max(2))?;
    let outcomes = vec![analysis::algebra()?, analysis::infrastructure(a == b)?];
    let mut out = ctx.out(Command::Check)?;
    let reports = write_outcomes(&mut out, &outcomes, json!({}))?;
    finish(out)?;
    verdict(&reports)
}

/// Collects the summaries under `root` into one document listing every
/// criterion.
fn report(root: &Path, overwrite: bool) -> Result<(), CliError> {
    let mut found: Vec<(String, serde_json::Value)> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for dir in entries {
        let path = dir.join(SUMMARY);
        if dir.file_name().is_some_and(|n| n == "report") || !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Infra(format!("{}: {e}", path.display())))?;
        found.push((dir.file_name().unwrap().to_string_lossy().into_owned(), value));
    }
    let mut criteria = Vec::new();
    for id in 1..=10u64 {
        let hit = found.iter().find_map(|(cmd, v)| {
            v["criteria"]
                .as_array()
                .and_then(|cs| cs.iter().find(|c| c["id"].as_u64() == Some(id)))
                .map(|c| (cmd.clone(), c.clone()))
        });
        criteria.push(match hit {
            Some((cmd, c)) => json!({ "id": id, "command": cmd, "status": c["status"], "report": c }),
            None => json!({ "id": id, "status": "not_run" }),
        });
    }
    let failed: Vec<String> = criteria
        .iter()
        .filter(|c| c["status"] == "fail")
        .map(|c| format!("criterion {}", c["id"]))
        .collect();
    let doc = json!({
        "criteria": criteria,
        "runs": found.iter().map(|(cmd, v)| json!({ "command": cmd, "summary": v })).collect::<Vec<_>>(),
        "failed": !failed.is_empty(),
    });
    let mut out = OutputDir::create(&root.join("report"), "report", "", overwrite)?;
    out.write_json("report.json", &doc)?;
    finish(out)?;
    for c in &criteria {
        log::info!("criterion {}: {}", c["id"], c["status"]);
    }
    if failed.is_empty() { Ok(()) } else { Err(CliError::Threshold(failed)) }
}

//! Acceptance suite: one line per criterion.
//!
//! The default scale divides the lengths of the desk scale by four so the
//! suite fits in a routine `cargo test`; `HOMOGLAB_ACCEPT_SCALE=full` runs
//! the desk scale itself. Thresholds are the same at both scales.
//!
//! Criteria listed in `ANALYZED_FAILURES` fail at both scales for reasons
//! worked out in the README. They still print FAIL; the process exits
//! non-zero only when some other criterion fails.

use std::time::Instant;

use homoglab::kernel::MaskBoundary;
use homoglab::stats::seed_range;
use homoglab::{GridSpec, SamplerSpec, SolverOptions};
use homoglab_cli::analysis::{self, CriterionReport, View};
use homoglab_cli::commands::{determinism_sample, gff_functionals};
use homoglab_cli::ensemble::{ProbeSpec, Prober, SampleRecord};
use nalgebra::DMatrix;

struct Scale {
    name: &'static str,
    side: usize,
    radii: Vec<f64>,
    oscillation_radii: Vec<f64>,
    additivity_radii: Vec<f64>,
    r_cal: f64,
    seeds: usize,
    clt_seeds: usize,
    gff_seeds: usize,
    localization_side: usize,
    localization_pairs: usize,
    homog_side: usize,
    homog_seeds: usize,
}

impl Scale {
    fn full() -> Self {
        Self {
            name: "full",
            side: 256,
            radii: vec![8.0, 16.0, 32.0, 64.0],
            oscillation_radii: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            additivity_radii: vec![8.0, 16.0, 32.0],
            r_cal: 32.0,
            seeds: 800,
            clt_seeds: 400,
            gff_seeds: 500,
            localization_side: 256,
            localization_pairs: 200,
            homog_side: 128,
            homog_seeds: 100,
        }
    }

    /// Lengths divided by four, except localization: the criterion names
    /// `r = 16`, and on `L = 128` the periodic images of the resampled region
    /// inflate the gap, so it runs at the desk size.
    fn quick() -> Self {
        Self {
            name: "quick",
            side: 64,
            radii: vec![2.0, 4.0, 8.0, 16.0],
            oscillation_radii: vec![2.0, 4.0, 8.0, 16.0, 32.0],
            additivity_radii: vec![2.0, 4.0, 8.0],
            r_cal: 8.0,
            seeds: 800,
            clt_seeds: 400,
            gff_seeds: 500,
            localization_side: 256,
            localization_pairs: 200,
            homog_side: 32,
            homog_seeds: 20,
        }
    }
}

const ANALYZED_FAILURES: [usize; 2] = [3, 10];
const CELLS_PER_UNIT: usize = 2;
const LOCALIZATION_RADIUS: f64 = 16.0;
const LOCALIZATION_DELTA: f64 = 0.5;
const FUNCTIONAL_WIDTH: f64 = 0.6;
const PERTURBATION: f64 = 0.02;

fn checkerboard() -> SamplerSpec {
    SamplerSpec::CheckerboardTwoPhase { a1: 1.0, a2: 4.0 }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn e1() -> (Vec<f64>, Vec<f64>) {
    (vec![0.0, 0.0], vec![1.0, 0.0])
}

/// Mean torus `ā` of the first sixteen seeds, used to shape the masks.
fn pilot_abar(grid: GridSpec) -> DMatrix<f64> {
    let probe = ProbeSpec::ahom_only(checkerboard(), grid, SolverOptions::default());
    let prober = Prober::new(probe, None).unwrap();
    let ens = prober.run(&seed_range(0, 16), workers()).unwrap();
    let mut m = DMatrix::zeros(2, 2);
    for r in ens.values() {
        m += &r.torus_abar;
    }
    m /= ens.len() as f64;
    0.5 * (&m + m.transpose())
}

fn main_ensemble(scale: &Scale) -> (Prober, Vec<SampleRecord>) {
    let grid = GridSpec::new(2, CELLS_PER_UNIT, scale.side).unwrap();
    let mut probe = ProbeSpec::ahom_only(checkerboard(), grid, SolverOptions::default());
    probe.mask_abar = pilot_abar(grid);
    probe.boundary = MaskBoundary::Periodic;
    probe.radii = scale.radii.clone();
    probe.mask_scales = vec![1.0, 1.0 - PERTURBATION, 1.0 + PERTURBATION];
    probe.additivity_radii = scale.additivity_radii.clone();
    probe.additivity_ratio = 2.0;
    probe.oscillation_radii = scale.oscillation_radii.clone();
    probe.functionals = gff_functionals(2, FUNCTIONAL_WIDTH);
    probe.functional_radius = scale.r_cal;
    let prober = Prober::new(probe, None).unwrap();
    let ens = prober.run(&seed_range(0, scale.seeds), workers()).unwrap();
    assert!(ens.failures.is_empty(), "failed seeds: {:?}", ens.failures);
    let records = ens.values().cloned().collect();
    (prober, records)
}

fn report(r: &CriterionReport, started: Instant) -> bool {
    println!("{} ({:.0}s)", r.line(), started.elapsed().as_secs_f64());
    r.passed()
}

fn main() {
    let scale = match std::env::var("HOMOGLAB_ACCEPT_SCALE").as_deref() {
        Ok("full") => Scale::full(),
        _ => Scale::quick(),
    };
    println!("acceptance at {} scale, {} workers", scale.name, workers());
    let (p, q) = e1();
    let mut results = Vec::new();

    let t = Instant::now();
    results.push(report(&analysis::algebra().unwrap().report, t));

    let t = Instant::now();
    let rows = analysis::refine_ahom(&checkerboard(), 2, scale.homog_side, &[2, 4, 8], &seed_range(0, scale.homog_seeds), &SolverOptions::default(), workers()).unwrap();
    let laminate = analysis::laminate_deviation(1.0, 4.0, GridSpec::new(2, 2, 16).unwrap(), &seed_range(0, 4), &SolverOptions::with_tol(1e-11)).unwrap();
    let reference = analysis::reference_abar(&checkerboard(), 2).unwrap();
    results.push(report(&analysis::homog_outcome(&rows, Some(&reference), Some(laminate)).report, t));

    let t = Instant::now();
    let (prober, records) = main_ensemble(&scale);
    println!("main ensemble: {} seeds on L = {} in {:.0}s", records.len(), scale.side, t.elapsed().as_secs_f64());
    let view = View::new(&prober, &records).unwrap();
    let clt_view = view.prefix(scale.clt_seeds).unwrap();

    let t = Instant::now();
    results.push(report(&analysis::clt(&clt_view, &p, &q).unwrap().report, t));
    results.push(report(&analysis::additivity(&clt_view, &p, &q).unwrap().report, t));
    results.push(report(&analysis::oscillation(&clt_view).unwrap().report, t));

    let t = Instant::now();
    let loc_grid = GridSpec::new(2, CELLS_PER_UNIT, scale.localization_side).unwrap();
    let loc = analysis::localization_records(
        &checkerboard(),
        loc_grid,
        &SolverOptions::default(),
        &pilot_abar(loc_grid),
        MaskBoundary::Periodic,
        &seed_range(10_000, scale.localization_pairs),
        LOCALIZATION_RADIUS,
        LOCALIZATION_DELTA,
        &p,
        &q,
        workers(),
    )
    .unwrap();
    results.push(report(&analysis::localization(&loc, LOCALIZATION_RADIUS, LOCALIZATION_DELTA).unwrap().report, t));

    let t = Instant::now();
    results.push(report(&analysis::duality(&clt_view).unwrap().report, t));
    let r_max = *scale.radii.last().unwrap();
    results.push(report(&analysis::gaussian(&view, r_max, &p, &q).unwrap().report, t));
    let gff_view = view.prefix(scale.gff_seeds).unwrap();
    results.push(report(&analysis::gff(&gff_view, scale.r_cal).unwrap().report, t));

    let t = Instant::now();
    let same = determinism_sample(&checkerboard(), 2, 1).unwrap() == determinism_sample(&checkerboard(), 2, 2).unwrap();
    results.push(report(&analysis::infrastructure(same).unwrap().report, t));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("{passed}/{} criteria passed", results.len());
    let mut unexpected = Vec::new();
    for (i, &ok) in results.iter().enumerate() {
        let id = i + 1;
        match (ok, ANALYZED_FAILURES.contains(&id)) {
            (false, false) => unexpected.push(id),
            (true, true) => println!("criterion {id} is listed as an analyzed failure but passed"),
            _ => {}
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
    println!("remaining failures {ANALYZED_FAILURES:?} are analyzed in README.md");
}

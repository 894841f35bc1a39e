//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Scenario configs live in `configs/` at the workspace root. Criterion 10
//! needs the MNIST IDX files in `$CELTIBERO_MNIST_DIR` (default `data/mnist`).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use celtibero::aggregation::{celtibero_aggregate, coordinate_median};
use celtibero::clustering::{agglomerative_two_clusters, DistanceMatrix, Linkage};
use celtibero::config::{parse_config, parse_config_str, ExperimentConfig};
use celtibero::data::LabeledDataset;
use celtibero::model::{Layer, ModelWeights};
use celtibero::orchestrator::{run_experiment, ExperimentOutcome};
use celtibero::report::rounds_csv;
use celtibero::training::{init_model, loss_and_gradient, Activation, NetworkArchitecture};
use celtibero::Error;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------------------
// 1. clustering vs step-replay oracle

/// Replays agglomerative merging from scratch: every step recomputes the
/// linkage of every cluster pair directly from its members.
fn oracle_two_clusters(d: &[Vec<f64>], linkage: Linkage) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..d.len()).map(|i| vec![i]).collect();
    while clusters.len() > 2 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in 0..clusters.len() {
                if a == b {
                    continue;
                }
                let pairs: Vec<f64> = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| d[i][j]))
                    .collect();
                let value = match linkage {
                    Linkage::Single => pairs.iter().cloned().fold(f64::INFINITY, f64::min),
                    Linkage::Complete => pairs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    Linkage::Average => pairs.iter().sum::<f64>() / pairs.len() as f64,
                };
                let ida = *clusters[a].iter().min().unwrap();
                let idb = *clusters[b].iter().min().unwrap();
                let key = (ida.min(idb), ida.max(idb));
                let better = match best {
                    None => true,
                    Some((bv, bk, _, _)) => value < bv || (value == bv && key < bk),
                };
                if better {
                    best = Some((value, key, a, b));
                }
            }
        }
        let (_, _, a, b) = best.unwrap();
        let (keep, drop) = (a.min(b), a.max(b));
        let moved = clusters.remove(drop);
        clusters[keep].extend(moved);
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort();
    clusters
}

#[allow(clippy::needless_range_loop)]
fn random_distance_rows(rng: &mut ChaCha8Rng, n: usize, grid: bool) -> Vec<Vec<f64>> {
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = if grid {
                rng.random_range(0..=8) as f64 * 0.25
            } else {
                rng.random_range(0.0..=2.0)
            };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut mismatches = 0;
    let mut total = 0;
    for trial in 0..500 {
        let n = rng.random_range(2..=8);
        // every other matrix uses a coarse grid so that merge ties actually occur
        let rows = random_distance_rows(&mut rng, n, trial % 2 == 1);
        let d = DistanceMatrix::from_rows(&rows).unwrap();
        for linkage in [Linkage::Average, Linkage::Single, Linkage::Complete] {
            let a = agglomerative_two_clusters(&d, linkage).unwrap();
            let mut got = vec![a.members(1).to_vec(), a.members(2).to_vec()];
            for c in &mut got {
                c.sort_unstable();
            }
            got.sort();
            total += 1;
            if got != oracle_two_clusters(&rows, linkage) {
                mismatches += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} mismatches over {total} runs (500 matrices, n<=8, 3 linkages)"),
    )
}

// ---------------------------------------------------------------------------
// 2. six benign / three identical poisoned

fn criterion_2() -> Verdict {
    let g = [0.5, -0.5, 2.0];
    let noise = [
        [0.01, -0.02, 0.03],
        [-0.03, 0.01, 0.02],
        [0.02, 0.03, -0.01],
        [0.00, -0.01, -0.03],
        [0.04, 0.02, 0.01],
        [-0.01, -0.04, 0.00],
    ];
    let model = |v: Vec<f64>| ModelWeights::new(vec![Layer::vector(v).unwrap()]);
    let global = model(g.to_vec());
    let mut locals: Vec<_> = noise
        .iter()
        .map(|e| model((0..3).map(|c| g[c] + 1.0 + e[c]).collect()))
        .collect();
    locals.extend((0..3).map(|_| model(g.iter().map(|x| x - 1.0).collect())));

    // hand computation: the benign deltas are (1,1,1) + noise; even count of six
    // takes the midpoint of the two central sorted values per coordinate
    let expected: Vec<f64> = (0..3)
        .map(|c| {
            let mut col: Vec<f64> = noise.iter().map(|e| 1.0 + e[c]).collect();
            col.sort_by(f64::total_cmp);
            g[c] + 0.5 * (col[2] + col[3])
        })
        .collect();

    let agg = celtibero_aggregate(&global, &locals, Linkage::Average).unwrap();
    let v = &agg.verdicts[0];
    let verdict_ok = v.poisoned == vec![6, 7, 8] && v.benign == (0..6).collect::<Vec<_>>() && v.score_1 > 0.0 && v.score_2 == 0.0;
    let err = agg
        .model
        .flatten()
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        verdict_ok && err <= 1e-9,
        format!("poisoned {:?}, max coordinate error {err:.1e} (tol 1e-9)", v.poisoned),
    )
}

// ---------------------------------------------------------------------------
// 3. analytic vs finite-difference gradients

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut networks = 0;
    while networks < 50 {
        let d = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let c = rng.random_range(2..=3);
        let mut sizes = vec![d, h];
        if rng.random_bool(0.3) {
            sizes.push(rng.random_range(1..=3));
        }
        sizes.push(c);
        let params: usize = sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        if params > 50 {
            continue;
        }
        let activation = if networks % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let arch = NetworkArchitecture::new(sizes, activation).unwrap();
        let mut model = init_model(&arch, rng.random());
        // non-zero biases keep ReLU pre-activations away from the kink
        for layer in model.layers_mut() {
            for w in layer.values_mut() {
                *w += rng.random_range(-0.5..0.5);
            }
        }
        let samples = rng.random_range(1..=6);
        let features: Vec<f64> = (0..samples * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..c)).collect();
        let data = LabeledDataset::new(features, labels, d, c).unwrap();
        let idx: Vec<usize> = (0..samples).collect();

        let (_, grad) = loss_and_gradient(&model, &arch, &data, &idx).unwrap();
        let analytic: Vec<f64> = grad.layers().iter().flatten().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for l in 0..model.num_layers() {
            for k in 0..model.layer(l).len() {
                let mut probe = model.clone();
                let base = probe.layer(l).values()[k];
                probe.layers_mut()[l].values_mut()[k] = base + step;
                let up = loss_and_gradient(&probe, &arch, &data, &idx).unwrap().0;
                probe.layers_mut()[l].values_mut()[k] = base - step;
                let down = loss_and_gradient(&probe, &arch, &data, &idx).unwrap().0;
                numeric.push((up - down) / (2.0 * step));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(norm(&diff) / scale);
        networks += 1;
    }
    check(
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} over {networks} networks (tol 1e-4)"),
    )
}

// ---------------------------------------------------------------------------
// 7. median breakdown

fn median_within_benign(benign: &[Vec<f64>], adversarial: &[Vec<f64>]) -> bool {
    let model = |v: &Vec<f64>| ModelWeights::new(vec![Layer::vector(v.clone()).unwrap()]);
    // interleave so adversaries are not always last
    let mut all = Vec::new();
    let (mut b, mut a) = (benign.iter(), adversarial.iter());
    loop {
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) => {
                all.extend(x.map(model));
                all.extend(y.map(model));
            }
        }
    }
    let out = coordinate_median(&all).unwrap().flatten();
    (0..out.len()).all(|c| {
        let lo = benign.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
        let hi = benign.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
        out[c] >= lo && out[c] <= hi
    })
}

/// All length-`k` sequences over `grid`.
fn sequences(grid: &[f64], k: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|p| {
                grid.iter().map(move |&g| {
                    let mut q = p.clone();
                    q.push(g);
                    q
                })
            })
            .collect();
    }
    out
}

fn criterion_7() -> Verdict {
    let benign_grid = [0.0, 1.0, 2.0];
    let adversarial_grid = [-1e6, -3.0, -1.0, 0.0, 1.0, 2.0, 3.0, 1e6];
    let mut cases = 0usize;
    let mut violations = 0usize;
    for n in 1..=7usize {
        let f = n.div_ceil(2) - 1;
        for b in sequences(&benign_grid, n - f) {
            for a in sequences(&adversarial_grid, f) {
                let wrap = |v: &Vec<f64>| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
                cases += 1;
                if !median_within_benign(&wrap(&b), &wrap(&a)) {
                    violations += 1;
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7);
    for _ in 0..1000 {
        let n = rng.random_range(1..=25usize);
        let dim = rng.random_range(1..=6usize);
        let f = n.div_ceil(2) - 1;
        let benign: Vec<Vec<f64>> = (0..n - f)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let adversarial: Vec<Vec<f64>> = (0..f)
            .map(|_| (0..dim).map(|_| rng.random_range(-1e9..1e9)).collect())
            .collect();
        cases += 1;
        if !median_within_benign(&benign, &adversarial) {
            violations += 1;
        }
    }
    check(
        violations == 0,
        format!("{violations} envelope violations over {cases} cases (exhaustive n<=7 + 1000 random)"),
    )
}

// ---------------------------------------------------------------------------
// scenario runs shared by criteria 4, 5, 6, 8, 9

const SCENARIOS: &[&str] = &[
    "iid_clean_fedavg",
    "iid_mra_fedavg",
    "iid_mra_celtibero",
    "dirichlet_mra_celtibero",
    "dirichlet_mra_median",
    "dirichlet_mra_krum",
    "dirichlet_neurotoxin_median",
    "dirichlet_neurotoxin_krum",
    "iid_ulfa_fedavg",
    "iid_ulfa_celtibero",
];

struct Scenario {
    config: ExperimentConfig,
    first: Result<ExperimentOutcome, String>,
    second: Result<ExperimentOutcome, String>,
}

fn load_scenarios() -> BTreeMap<&'static str, Scenario> {
    let dir = workspace_root().join("configs");
    SCENARIOS
        .iter()
        .map(|&name| {
            let config = parse_config(&dir.join(format!("{name}.toml")))
                .unwrap_or_else(|e| panic!("scenario {name}: {e}"));
            let run = || run_experiment(&config).map_err(|e| e.to_string());
            let (first, second) = (run(), run());
            (name, Scenario { config, first, second })
        })
        .collect()
}

fn outcome<'a>(s: &'a BTreeMap<&str, Scenario>, name: &str) -> Result<&'a ExperimentOutcome, String> {
    s[name].first.as_ref().map_err(|e| format!("{name} failed: {e}"))
}

fn criterion_4(s: &BTreeMap<&str, Scenario>) -> Result<Verdict, String> {
    let clean = outcome(s, "iid_clean_fedavg")?.summary.final_mta;
    let fedavg = outcome(s, "iid_mra_fedavg")?.summary.final_asr;
    let celt = &outcome(s, "iid_mra_celtibero")?.summary;
    let gap = (celt.final_mta - clean).abs();
    Ok(check(
        fedavg >= 0.80 && celt.final_asr <= 0.05 && gap <= 0.03,
        format!(
            "fedavg ASR {fedavg:.3} (>=0.80), celtibero ASR {:.3} (<=0.05), celtibero MTA {:.3} vs clean {clean:.3} (gap {gap:.3} <= 0.03)",
            celt.final_asr, celt.final_mta
        ),
    ))
}

fn criterion_5(s: &BTreeMap<&str, Scenario>) -> Result<Verdict, String> {
    let celt = outcome(s, "dirichlet_mra_celtibero")?.summary.final_asr;
    let mut baselines = Vec::new();
    for name in [
        "dirichlet_mra_median",
        "dirichlet_mra_krum",
        "dirichlet_neurotoxin_median",
        "dirichlet_neurotoxin_krum",
    ] {
        baselines.push((name, outcome(s, name)?.summary.final_asr));
    }
    let (best_name, best) = baselines
        .iter()
        .cloned()
        .fold(("", f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok(check(
        celt <= 0.10 && best >= 0.5,
        format!("celtibero ASR {celt:.3} (<=0.10), strongest baseline {best_name} ASR {best:.3} (>=0.5)"),
    ))
}

fn criterion_6(s: &BTreeMap<&str, Scenario>) -> Result<Verdict, String> {
    let fedavg = &outcome(s, "iid_ulfa_fedavg")?.summary;
    let celt = &outcome(s, "iid_ulfa_celtibero")?.summary;
    Ok(check(
        fedavg.final_asr >= 0.05 && celt.final_asr <= 0.02,
        format!(
            "fedavg ASR {:.3} (>=0.05), celtibero ASR {:.3} (<=0.02)",
            fedavg.final_asr, celt.final_asr
        ),
    ))
}

fn csv_without_wall_time(o: &ExperimentOutcome) -> String {
    rounds_csv(&o.reports)
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_8(s: &BTreeMap<&str, Scenario>) -> Result<Verdict, String> {
    let mut differing = Vec::new();
    for (name, sc) in s {
        match (&sc.first, &sc.second) {
            (Ok(a), Ok(b)) if csv_without_wall_time(a) == csv_without_wall_time(b) => {}
            _ => differing.push(*name),
        }
    }
    Ok(check(
        differing.is_empty(),
        format!("{} scenarios rerun, differing: {differing:?}", s.len()),
    ))
}

fn criterion_9(s: &BTreeMap<&str, Scenario>) -> Result<Verdict, String> {
    let mut problems = Vec::new();
    let base = &s["iid_mra_celtibero"].config;
    for fraction in [0.5, 0.6] {
        let text = base
            .to_toml_string()
            .map_err(|e| e.to_string())?
            .replace("malicious_fraction = 0.4", &format!("malicious_fraction = {fraction}"));
        match parse_config_str(&text) {
            Err(Error::ConfigInvalid(v)) if v.iter().any(|m| m.contains("threat model")) => {}
            other => problems.push(format!("fraction {fraction} not rejected: {:?}", other.map(|_| ()))),
        }
        let mut cfg = base.clone();
        cfg.malicious_fraction = fraction;
        if !matches!(run_experiment(&cfg), Err(Error::ConfigInvalid(_))) {
            problems.push(format!("run with fraction {fraction} not rejected"));
        }
    }
    let mut rounds = 0;
    for (name, sc) in s {
        for out in [&sc.first, &sc.second].into_iter().flatten() {
            for r in out.reports.iter().chain(out.reference.iter().flatten()) {
                rounds += 1;
                if !(0.0..=1.0).contains(&r.mta) || !(0.0..=1.0).contains(&r.asr) {
                    problems.push(format!("{name} round {}: mta {} asr {}", r.round, r.mta, r.asr));
                }
                if r.verdicts.iter().any(|v| v.benign.is_empty()) {
                    problems.push(format!("{name} round {}: empty benign set", r.round));
                }
            }
        }
    }
    Ok(check(
        problems.is_empty(),
        format!("threat model rejected at 0.5 and 0.6; {rounds} round reports checked; problems: {problems:?}"),
    ))
}

// ---------------------------------------------------------------------------
// 10. MNIST subset

fn criterion_10() -> Verdict {
    let dir = std::env::var_os("CELTIBERO_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"));
    let files = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    if !files.iter().all(|f| dir.join(f).is_file()) {
        return Verdict::Skip(format!("MNIST IDX files not found in {}", dir.display()));
    }
    let mut results = Vec::new();
    for agg in ["fedavg", "celtibero"] {
        let text = format!(
            r#"
seed = 1
rounds = 20
clients = 20
malicious_fraction = 0.0
[dataset.mnist]
train_images = "{}"
train_labels = "{}"
test_images = "{}"
test_labels = "{}"
train_limit = 2000
test_limit = 2000
[partition]
kind = "iid"
[aggregator]
kind = "{agg}"
[model]
hidden = [32]
"#,
            dir.join(files[0]).display(),
            dir.join(files[1]).display(),
            dir.join(files[2]).display(),
            dir.join(files[3]).display(),
        );
        let cfg = match parse_config_str(&text) {
            Ok(c) => c,
            Err(e) => return Verdict::Fail(format!("config: {e}")),
        };
        match run_experiment(&cfg) {
            Ok(o) => results.push((agg, o.summary.final_mta)),
            Err(e) => return Verdict::Fail(format!("{agg}: {e}")),
        }
    }
    check(
        results.iter().all(|(_, m)| *m >= 0.85),
        format!("final MTA {results:?} (>=0.85)"),
    )
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::Fail(format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, v: Verdict| {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2} {name}: {detail}");
    };

    report(1, "clustering matches step-replay oracle", guarded(criterion_1));
    report(2, "six benign / three poisoned aggregation", guarded(criterion_2));
    report(3, "gradient check", guarded(criterion_3));

    let scenarios = catch_unwind(load_scenarios).map_err(|_| "scenario setup panicked".to_string());
    let scenario = |f: fn(&BTreeMap<&str, Scenario>) -> Result<Verdict, String>| {
        guarded(|| match &scenarios {
            Ok(s) => f(s).unwrap_or_else(Verdict::Fail),
            Err(e) => Verdict::Fail(e.clone()),
        })
    };
    report(4, "iid model replacement trend", scenario(criterion_4));
    report(5, "non-iid backdoor trend", scenario(criterion_5));
    report(6, "untargeted label flip mitigation", scenario(criterion_6));
    report(7, "median breakdown", guarded(criterion_7));
    report(8, "determinism", scenario(criterion_8));
    report(9, "threat-model and invariant guards", scenario(criterion_9));
    report(10, "MNIST subset accuracy", guarded(criterion_10));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

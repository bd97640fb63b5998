//! One pass/fail line per acceptance criterion.
//!
//! The pretrained backbone is cached under the cargo target directory, keyed
//! by the recipe hash, so only the first run pays for pretraining.

mod common;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ppdst_core::backbone::Backbone;
use ppdst_core::cl::{evaluate_checkpoint, KeyLoss, Method, Setup, TrainConfig};
use ppdst_core::data::lexicon::SLOT_TYPES;
use ppdst_core::data::synthetic::TWIN_POSITION;
use ppdst_core::data::{parse_state, serialize_state, Catalog, DialogState, SyntheticSpec, NONE};
use ppdst_core::eval::{forgetting, jga_avg, AccuracyMatrix};
use ppdst_core::experiment::{cached_backbone, run_seed, BackboneRecipe, DataSource, SeedOutcome, Spread};
use ppdst_core::numerics::{Tape, Tensor};
use ppdst_core::pool::{self, gamma, PoolConfig, PromptPool};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, n: usize, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("criterion {n}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_fidelity(r: &mut Report) {
    let t0 = Instant::now();
    let setup = common::toy_setup();
    let data = common::toy_data(&setup);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (key_loss, current) in [(KeyLoss::Plain, true), (KeyLoss::Bce, true), (KeyLoss::Bce, false)] {
        let (w, n) = common::gradient_check(&setup, &data, key_loss, current, 0.3, 1e-5);
        worst = worst.max(w);
        coords += n;
    }
    let elapsed = t0.elapsed();
    r.line(
        1,
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over {coords} coordinates, {}", secs(elapsed)),
    );
}

const PPT_TABLE: [f64; 15] = [
    0.510, 0.537, 0.534, 0.422, 0.368, 0.144, 0.086, 0.497, 0.324, 0.014, 0.254, 0.264, 0.263, 0.352, 0.628,
];
const PPT_R_TABLE: [f64; 15] = [
    0.538, 0.563, 0.555, 0.353, 0.419, 0.230, 0.416, 0.473, 0.211, 0.255, 0.338, 0.228, 0.020, 0.256, 0.589,
];

fn final_row_matrix(values: &[f64]) -> AccuracyMatrix {
    let t = values.len();
    let mut m = AccuracyMatrix::new(t);
    for (i, &v) in values.iter().enumerate() {
        m.set(t - 1, i, v).unwrap();
    }
    m
}

fn metric_arithmetic(r: &mut Report) {
    let ppt = jga_avg(&final_row_matrix(&PPT_TABLE)).unwrap();
    let ppt_r = jga_avg(&final_row_matrix(&PPT_R_TABLE)).unwrap();
    // For x = 0.2 and 0.23 the cell x − 0.115 is stored without rounding, so
    // the index must be bit-exact; elsewhere the cell itself carries one
    // rounding.
    let trajectory = |x: f64| {
        let m = AccuracyMatrix::from_rows(&[vec![x], vec![x, 0.7], vec![x - 0.115, 0.7, 0.4]]).unwrap();
        forgetting(&m, 2, 0).unwrap()
    };
    let exact = [0.2, 0.23].iter().all(|&x| trajectory(x) == 0.115);
    let worst_ulps = [0.5, 0.8, 1.0]
        .iter()
        .map(|&x| trajectory(x).to_bits().abs_diff(0.115f64.to_bits()))
        .max()
        .unwrap();
    let pass = (ppt - 0.346).abs() <= 0.0005 && (ppt_r - 0.363).abs() <= 0.0005 && exact && worst_ulps <= 1;
    r.line(
        2,
        pass,
        format!("jga_avg PPT {ppt:.5}, PPT-R {ppt_r:.5}; forgetting 0.115 exact where representable, worst {worst_ulps} ulp otherwise"),
    );
}

fn brute_force(keys: &[Vec<f64>], c: &[f64], n: usize) -> Vec<usize> {
    let dist = |k: &[f64]| c.iter().zip(k).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let d: Vec<f64> = keys.iter().map(|k| dist(k)).collect();
    // rank = number of keys strictly ahead in (distance, index) order
    (0..keys.len())
        .filter(|&i| (0..keys.len()).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count() < n)
        .collect()
}

fn selection_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let table = Tensor::from_fn(vec![4, 2], |i| i as f64);
    let mut mismatches = 0;
    let mut tied = 0;
    for case in 0..1000 {
        let size = rng.gen_range(2..=12);
        let per_task = rng.gen_range(1..=size);
        let dim = rng.gen_range(1..=4);
        let mut keys: Vec<Vec<f64>> = (0..size)
            .map(|_| (0..dim).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect())
            .collect();
        let mut c: Vec<f64> = (0..dim).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect();
        match case % 4 {
            0 => {
                let (a, b) = (rng.gen_range(0..size), rng.gen_range(0..size));
                keys[b] = keys[a].clone();
            }
            1 => {
                // every key on a sphere around c
                c = vec![0.0; dim];
                for k in &mut keys {
                    k.iter_mut().for_each(|v| *v = 0.0);
                    let axis = rng.gen_range(0..dim);
                    k[axis] = if rng.gen_bool(0.5) { 1.5 } else { -1.5 };
                }
            }
            2 => keys.iter_mut().for_each(|k| k.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5))),
            _ => {}
        }
        let cfg = PoolConfig {
            size,
            per_task,
            prompt_len: 1,
            embed_dim: 2,
            key_dim: dim,
        };
        let mut pool = PromptPool::new(cfg, &table, case).unwrap();
        for (p, k) in pool.keys.iter_mut().zip(&keys) {
            p.value = Tensor::new(vec![dim], k.clone()).unwrap();
        }
        let mut dists: Vec<f64> = keys.iter().map(|k| pool::distance(&c, k).unwrap()).collect();
        dists.sort_by(f64::total_cmp);
        if dists.windows(2).any(|w| w[0] == w[1]) {
            tied += 1;
        }
        if pool.select_test(&c).unwrap().indices != brute_force(&keys, &c, per_task) {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    r.line(
        3,
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} mismatches in 1000 instances ({tied} with tied distances), {}", secs(elapsed)),
    );
}

fn key_step_distance(c: &[f64], k: &[f64], label_current: bool) -> (f64, f64) {
    let tape = Tape::new();
    let cv = tape.constant(Tensor::new(vec![c.len()], c.to_vec()).unwrap());
    let kv = tape.leaf(Tensor::new(vec![k.len()], k.to_vec()).unwrap());
    let loss = pool::key_loss_bce(&tape, cv, &[kv], label_current).unwrap();
    let g = tape.backward(loss).unwrap().get(kv).unwrap();
    let stepped: Vec<f64> = k.iter().zip(g.data()).map(|(k, g)| k - 0.1 * g).collect();
    (pool::distance(c, k).unwrap(), pool::distance(c, &stepped).unwrap())
}

fn closed_form_losses(r: &mut Report) {
    let c = [0.3, -1.2, 0.7, 2.0];
    let g = gamma(&c, &c).unwrap();
    let tape = Tape::new();
    let half = tape.constant(Tensor::scalar(0.5));
    let bce = tape.scalar_value(tape.bce(half, 1.0).unwrap());
    let bce_err = (bce - std::f64::consts::LN_2).abs();
    let k = [1.0, 0.5, -0.2, 1.1];
    let (d, pulled) = key_step_distance(&c, &k, true);
    let (_, pushed) = key_step_distance(&c, &k, false);
    let pass = g == 0.5 && bce_err <= 1e-12 && pulled < d && pushed > d;
    r.line(
        4,
        pass,
        format!("gamma(c,c) = {g}, |BCE(0.5,1) - ln 2| = {bce_err:.1e}, distance {d:.4} -> {pulled:.4} (label 1) / {pushed:.4} (label 0)"),
    );
}

struct Suites {
    standard: Vec<(Method, Vec<SeedOutcome>)>,
    similar: Vec<(Method, Vec<SeedOutcome>)>,
    elapsed: Duration,
}

impl Suites {
    fn get<'a>(list: &'a [(Method, Vec<SeedOutcome>)], m: Method) -> &'a [SeedOutcome] {
        &list.iter().find(|(x, _)| *x == m).expect("method ran").1
    }
}

fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    Spread::of(&values.into_iter().collect::<Vec<_>>()).expect("non-empty").median
}

fn run_suites(backbone: &Arc<Backbone>, catalog: &Catalog, config: &TrainConfig) -> Suites {
    let t0 = Instant::now();
    let run = |source: &DataSource, methods: &[Method]| {
        methods
            .iter()
            .map(|&m| {
                let outcomes = SEEDS
                    .iter()
                    .map(|&s| run_seed(m, backbone.clone(), catalog, source, config, s).unwrap())
                    .collect();
                (m, outcomes)
            })
            .collect::<Vec<_>>()
    };
    let standard = run(&DataSource::default(), &[Method::Ppt, Method::PptR, Method::Ocpt, Method::SeqNaive]);
    let similar_source = DataSource::Synthetic {
        spec: SyntheticSpec {
            similar_pair: true,
            ..SyntheticSpec::default()
        },
        seed: None,
    };
    let similar = run(&similar_source, &[Method::PptR, Method::PptRPromptOnly, Method::PptROrdinary, Method::Ppt]);
    Suites {
        standard,
        similar,
        elapsed: t0.elapsed(),
    }
}

fn desk_scale(r: &mut Report, s: &Suites) {
    let jga = |m| median(Suites::get(&s.standard, m).iter().map(|o| o.metrics.jga_avg));
    let (ppt, ppt_r, ocpt, naive) = (jga(Method::Ppt), jga(Method::PptR), jga(Method::Ocpt), jga(Method::SeqNaive));
    let acc = median(Suites::get(&s.standard, Method::Ppt).iter().map(|o| o.metrics.acc_key.unwrap()));
    let forget = median(Suites::get(&s.standard, Method::SeqNaive).iter().map(|o| forgetting(&o.run.accuracy, 4, 0).unwrap()));
    let checks = [acc >= 0.9, ppt >= naive + 0.15, ocpt >= ppt, ppt_r >= ppt - 0.02, forget > 0.2];
    let budget = s.elapsed < Duration::from_secs(15 * 60);
    let failed: Vec<&str> = ["a", "b", "c", "d", "e"]
        .iter()
        .zip(checks)
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    r.line(
        5,
        failed.is_empty() && budget,
        format!(
            "medians: PPT Acc_key {acc:.3}, JGA_avg PPT {ppt:.3} / seq_naive {naive:.3} / OCPT {ocpt:.3} / PPT-R {ppt_r:.3}, \
             seq_naive forgetting {forget:.3}; failed parts {failed:?}; {} for 24 runs",
            secs(s.elapsed)
        ),
    );
}

fn ablation_direction(r: &mut Report, s: &Suites) {
    let per_seed = |m| Suites::get(&s.similar, m).iter().map(|o| o.metrics.acc_key.unwrap()).collect::<Vec<_>>();
    let (full, ordinary) = (per_seed(Method::PptR), per_seed(Method::PptROrdinary));
    let prompt_only = median(per_seed(Method::PptRPromptOnly));
    let (full_m, ordinary_m) = (median(full.iter().copied()), median(ordinary.iter().copied()));
    let show = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join("/");
    r.line(
        6,
        full_m >= prompt_only && full_m > ordinary_m,
        format!(
            "median Acc_key with a similar pair: PPT-R {full_m:.3} ({}), prompt_only {prompt_only:.3}, ordinary {ordinary_m:.3} ({})",
            show(&full),
            show(&ordinary)
        ),
    );
}

fn similar_confusion(r: &mut Report, s: &Suites) {
    let rises: Vec<(f64, f64)> = Suites::get(&s.similar, Method::Ppt)
        .iter()
        .map(|o| {
            let m = &o.run.accuracy;
            (forgetting(m, TWIN_POSITION - 1, 0).unwrap(), forgetting(m, TWIN_POSITION, 0).unwrap())
        })
        .collect();
    let count = rises.iter().filter(|(before, after)| after > before).count();
    let shown: Vec<String> = rises.iter().map(|(b, a)| format!("{b:.3}->{a:.3}")).collect();
    r.line(
        7,
        count >= 2,
        format!("PPT forgetting of task 0 before/after its twin: {}; rose in {count} of 3 seeds", shown.join(", ")),
    );
}

fn reproducibility(r: &mut Report, s: &Suites, backbone: &Arc<Backbone>, catalog: &Catalog, config: &TrainConfig) {
    let first = &Suites::get(&s.standard, Method::PptR)[0];
    let again = run_seed(Method::PptR, backbone.clone(), catalog, &DataSource::default(), config, first.seed).unwrap();
    let same = again.run.accuracy == first.run.accuracy && again.run.pool == first.run.pool;
    r.line(8, same, format!("PPT-R seed {} rerun: accuracy matrix and pool bit-identical = {same}", first.seed));
}

fn random_state(rng: &mut ChaCha8Rng, slots: &[String], task_id: &str) -> DialogState {
    let values = slots
        .iter()
        .map(|s| {
            let v = if rng.gen_bool(0.3) {
                NONE.to_string()
            } else {
                let words: Vec<&str> = (0..rng.gen_range(1..=3))
                    .map(|_| {
                        let t = &SLOT_TYPES[rng.gen_range(0..SLOT_TYPES.len())];
                        t.values[rng.gen_range(0..t.values.len())]
                    })
                    .collect();
                words.join(" ")
            };
            (s.clone(), v)
        })
        .collect();
    DialogState {
        task_id: task_id.to_string(),
        values,
    }
}

fn round_trips(r: &mut Report, s: &Suites, backbone: &Arc<Backbone>, catalog: &Catalog, config: &TrainConfig) {
    let setup = Setup::new(backbone.clone(), Arc::new(catalog.tokenizer()), config.key_dim, config.context_seed).unwrap();
    let ppt = &Suites::get(&s.standard, Method::Ppt)[0];
    let cfg = TrainConfig {
        seed: ppt.seed,
        ..config.clone()
    };
    let data = setup.prepare(&DataSource::default().tasks(catalog, ppt.seed).unwrap()).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let schemas = data.registry.schemas();
    let mut state_failures = 0;
    for _ in 0..1000 {
        let schema = &schemas[rng.gen_range(0..schemas.len())];
        let state = random_state(&mut rng, schema.slots(), &schema.task_id);
        let ids = serialize_state(&state, schema, &setup.tokenizer).unwrap();
        if parse_state(&ids, &data.registry, &setup.tokenizer).ok() != Some(state) {
            state_failures += 1;
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let bb_path = dir.path().join("backbone.ckpt");
    backbone.save(&bb_path).unwrap();
    let loaded = Backbone::load(&bb_path).unwrap();
    let mut generate_diffs = 0;
    let mut generated = 0;
    for task in &data.tasks {
        for sample in task.test.iter().take(8) {
            let block: Vec<&Tensor> = (0..config.per_task).map(|i| ppt.run.pool.prompt(i)).collect();
            let input = pool::assemble_tensor(&sample.history, &block).unwrap();
            let a = backbone.generate(&input, config.max_decode_len).unwrap();
            let b = loaded.generate(&input, config.max_decode_len).unwrap();
            generated += 1;
            generate_diffs += usize::from(a != b);
        }
    }

    let mut cell_diffs = 0;
    for (t, pool) in ppt.run.checkpoints.iter().enumerate() {
        let path = dir.path().join(format!("pool_{t}.bin"));
        pool.save(&path, serde_json::json!({ "after_task": t })).unwrap();
        let (back, _) = PromptPool::load(&path).unwrap();
        let ev = evaluate_checkpoint(Method::Ppt, &setup, &data, &cfg, &back, t).unwrap();
        for (i, rep) in ev.reports.iter().enumerate() {
            cell_diffs += usize::from(Some(rep.jga) != ppt.run.accuracy.get(t, i));
        }
    }
    let pass = state_failures == 0 && generate_diffs == 0 && cell_diffs == 0 && loaded.checksum() == backbone.checksum();
    r.line(
        9,
        pass,
        format!(
            "{state_failures} of 1000 state round-trips failed; {generate_diffs} of {generated} generate() outputs differ after backbone reload; \
             {cell_diffs} accuracy cells differ after pool reload"
        ),
    );
}

fn main() {
    let mut r = Report { failures: 0 };
    gradient_fidelity(&mut r);
    metric_arithmetic(&mut r);
    selection_oracle(&mut r);
    closed_form_losses(&mut r);

    let catalog = Catalog::standard();
    let recipe = BackboneRecipe::default();
    let cache: PathBuf = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let t0 = Instant::now();
    let (backbone, manifest, hit) = cached_backbone(&recipe, &catalog, &cache).expect("backbone");
    println!(
        "pretraining: {} ({}; held-out loss {:.3} -> {:.3}; not counted toward criterion 5)",
        if hit { "cache hit".to_string() } else { format!("trained in {}", secs(t0.elapsed())) },
        &manifest.config_hash[..16],
        manifest.held_out_ce_initial,
        manifest.held_out_ce_final,
    );
    let backbone = Arc::new(backbone);
    let config = TrainConfig::desk();
    let suites = run_suites(&backbone, &catalog, &config);
    desk_scale(&mut r, &suites);
    ablation_direction(&mut r, &suites);
    similar_confusion(&mut r, &suites);
    reproducibility(&mut r, &suites, &backbone, &catalog, &config);
    round_trips(&mut r, &suites, &backbone, &catalog, &config);

    println!("{} of 9 criteria passed", 9 - r.failures);
    // FAIL lines are reported, not fatal, unless strict mode is requested.
    if r.failures > 0 && std::env::var_os("PPDST_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}

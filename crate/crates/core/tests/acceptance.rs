//! Acceptance run: one PASS/FAIL line per criterion, in order, with the
//! measured values and wall time. Criteria run sequentially so the timings
//! are not distorted by the test harness running them in parallel.
//!
//! The process exits 0 after reporting so the rest of the workspace suite
//! still runs; set `MEM_ACCEPTANCE_STRICT=1` to exit 1 when any gating
//! criterion fails.

mod common;

use std::panic;
use std::time::{Duration, Instant};

use common::*;
use mem_core::data::{HistogramSource, InputSpec};
use mem_core::derive_seed;
use mem_core::downstream::{
    attach_classifier, finetune, linear_probe, seg_metrics, split_labels, FinetuneConfig, ProbeConfig,
    FEWLABEL_EPOCHS,
};
use mem_core::dvae::{
    codebook_usage, gumbel_softmax, kl_to_uniform, loss_curve_csv, mean_reconstruction_mse, train_dvae, DvaeModel,
    DvaeTrainConfig,
};
use mem_core::event_io::{parse_csv, parse_evt, write_csv, write_evt};
use mem_core::histogram::{remove_hot_pixels, DEFAULT_HOT_PIXEL_K, DEFAULT_N_MAX};
use mem_core::rng_from_seed;
use mem_core::synth::{gen_dataset, LabeledDataset, SynthConfig};
use mem_core::tensor::{ParamStore, Tape, Tensor};
use mem_core::vit::{pretrain, pretrain_curve_csv, Objective, PretrainConfig, PretrainLogRow, VitConfig, VitModel};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    gating_failures: Vec<usize>,
}

impl Report {
    fn line(&mut self, id: usize, pass: bool, what: &str, detail: String, elapsed: Duration, limit: Option<Duration>) {
        let within = limit.is_none_or(|l| elapsed <= l);
        let pass = pass && within;
        if !pass {
            self.gating_failures.push(id);
        }
        let limit = limit.map_or(String::new(), |l| format!(" < {}s", l.as_secs()));
        let time = format!("{:.1}s{limit}", elapsed.as_secs_f64());
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict}: {what}; {detail} [{time}]");
    }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn sources(ds: &LabeledDataset) -> (HistogramSource, HistogramSource) {
    let src = |samples: Vec<&mem_core::synth::Sample>| {
        HistogramSource::labeled(samples.iter().map(|s| s.stream.clone()).collect(), samples.iter().map(|s| s.label).collect())
    };
    (src(ds.train()), src(ds.test()))
}

fn gradients(r: &mut Report) {
    let t = Instant::now();
    let (mut worst, mut worst_op, mut checks) = (0.0f64, "", 0);
    for rows in 1..=6 {
        for cols in 1..=6 {
            for (op, err) in op_errors(rows, cols, derive_seed(1, rows as u64, cols as u64)) {
                checks += 1;
                if err > worst {
                    (worst, worst_op) = (err, op);
                }
            }
        }
    }
    let (dvae, mem) = (composed_dvae_error(), composed_mem_error());
    let pass = worst < OP_TOL && dvae < COMPOSED_TOL && mem < COMPOSED_TOL;
    let detail = format!(
        "{checks} op checks, worst {worst:.2e} ({worst_op}); dVAE ELBO {dvae:.2e}, 2-block MEM loss {mem:.2e}"
    );
    r.line(1, pass, "finite-difference gradients (ops < 1e-5, composed < 1e-4)", detail, t.elapsed(), minutes(2));
}

fn histograms(r: &mut Report) {
    let t = Instant::now();
    let mut rng = rng_from_seed(2024);
    let mut mismatches = Vec::new();
    for i in 0..1000 {
        let s = random_stream(&mut rng);
        let n_max = if rng.random_bool(0.5) { rng.random_range(1..500) } else { DEFAULT_N_MAX };
        if let Some(m) = histogram_mismatch(&s, n_max) {
            mismatches.push(format!("stream {i}: {m}"));
        }
    }
    let detail = match mismatches.first() {
        None => "1000 random streams match the per-event oracle; slice sums bit-exact".to_string(),
        Some(m) => format!("{} mismatching streams, first {m}", mismatches.len()),
    };
    r.line(2, mismatches.is_empty(), "histogram layouts equal the naive oracle", detail, t.elapsed(), minutes(1));
}

fn hot_pixels(r: &mut Report) {
    let t = Instant::now();
    let failed: Vec<u64> = (0..100)
        .filter(|&seed| {
            let (hist, hot) = with_hot_pixel(seed);
            !only_hot_pixel_removed(&hist, &remove_hot_pixels(&hist, DEFAULT_HOT_PIXEL_K), hot)
        })
        .collect();
    let detail = format!("{} of 100 injected 100×-mean pixels handled exactly", 100 - failed.len());
    r.line(3, failed.is_empty(), "hot pixel zeroed, all other pixels unchanged", detail, t.elapsed(), minutes(1));
}

fn dvae_gate(r: &mut Report) {
    let t = Instant::now();
    let ds = gen_dataset(4, 128, 0, &SynthConfig::default());
    let (train, test) = sources(&ds);
    let cfg = DvaeTrainConfig::default();
    let spec = InputSpec { layout: cfg.model.layout, size: (cfg.model.height, cfg.model.width) };
    let held = test.eval_inputs(&spec, DEFAULT_N_MAX);
    let initial = DvaeModel::new(cfg.model, &mut rng_from_seed(cfg.seed)).unwrap();
    let mse0 = mean_reconstruction_mse(&initial, &held).unwrap();
    let (model, curve) = train_dvae(&train, &cfg).unwrap();
    let finite = curve.iter().all(|row| row.recon_mse.is_finite() && row.kl.is_finite());
    let mse = mean_reconstruction_mse(&model, &held).unwrap();
    let usage = codebook_usage(&model, &held).unwrap();
    let ratio = mse / mse0;
    let detail = format!(
        "{} samples, N={}, held-out MSE ratio {ratio:.3} (≤ 0.5), codebook usage {:.1} % (≥ 10 %), losses finite: {finite}",
        ds.samples.len(),
        cfg.model.vocab,
        100.0 * usage
    );
    let pass = finite && ratio <= 0.5 && usage >= 0.10;
    r.line(4, pass, "dVAE reconstruction and codebook use", detail, t.elapsed(), minutes(10));
}

/// Dataset, tokenizer and MEM-pretrained backbone for one seed, shared by
/// the probe and few-label criteria.
struct Pretrained {
    seed: u64,
    train: HistogramSource,
    test: HistogramSource,
    vit: VitModel,
    curve: Vec<PretrainLogRow>,
}

fn pretrained(seed: u64) -> Pretrained {
    let ds = gen_dataset(4, 256, seed, &SynthConfig::default());
    let (train, test) = sources(&ds);
    let (dvae, _) = train_dvae(&train, &DvaeTrainConfig { seed, ..Default::default() }).unwrap();
    let (vit, curve) = pretrain(Some(&dvae), &train, &PretrainConfig { seed, ..Default::default() }).unwrap();
    Pretrained { seed, train, test, vit, curve }
}

fn scratch_backbone(seed: u64) -> VitModel {
    VitModel::new(VitConfig::desk(), &mut rng_from_seed(derive_seed(seed, 3, 0))).unwrap()
}

fn probe_top1(backbone: &VitModel, p: &Pretrained) -> f64 {
    let cfg = ProbeConfig { seed: p.seed, ..Default::default() };
    linear_probe(backbone, &p.train, &p.test, 4, &cfg).unwrap().test_top1
}

fn probe_gap(r: &mut Report) -> Vec<Pretrained> {
    let t = Instant::now();
    let mut runs = Vec::new();
    let mut parts = Vec::new();
    let mut all = true;
    for seed in SEEDS {
        let p = pretrained(seed);
        let (pre, rnd) = (probe_top1(&p.vit, &p), probe_top1(&scratch_backbone(seed), &p));
        let gap = 100.0 * (pre - rnd);
        all &= gap >= 15.0;
        parts.push(format!("seed {seed}: {:.1} vs {:.1} ({gap:+.1} pp)", 100.0 * pre, 100.0 * rnd));
        runs.push(p);
    }
    let detail = format!("pretrained vs random-init probe top-1, {}", parts.join("; "));
    r.line(5, all, "probe gap ≥ 15 pp on every seed", detail, t.elapsed(), minutes(20));
    runs
}

fn finetune_top1(backbone: &VitModel, labeled: &HistogramSource, p: &Pretrained) -> f64 {
    let cfg = FinetuneConfig { seed: p.seed, ..Default::default() }.for_epochs(FEWLABEL_EPOCHS, labeled.len());
    let (_, curve) = finetune(attach_classifier(backbone, 4), labeled, Some(&p.test), &cfg).unwrap();
    curve.last().and_then(|row| row.test_top1).unwrap()
}

fn few_labels(r: &mut Report, runs: &[Pretrained]) {
    let t = Instant::now();
    let mut ok = 0;
    let mut parts = Vec::new();
    for p in runs {
        let cells = split_labels(&p.train.labels, 4, &[0.5, 0.2, 0.1], p.seed).unwrap();
        let tenth = p.train.subset(&cells[2]);
        let scratch = scratch_backbone(p.seed);
        let (m10, s10) = (finetune_top1(&p.vit, &tenth, p), finetune_top1(&scratch, &tenth, p));
        let (m100, s100) = (finetune_top1(&p.vit, &p.train, p), finetune_top1(&scratch, &p.train, p));
        let (g10, g100) = (100.0 * (m10 - s10), 100.0 * (m100 - s100));
        let holds = m10 >= s10 && m100 >= s100 && g10 >= g100 - 2.0;
        ok += holds as usize;
        parts.push(format!(
            "seed {}: 10 % {:.1}/{:.1}, 100 % {:.1}/{:.1}, gaps {g10:+.1}/{g100:+.1} pp{}",
            p.seed,
            100.0 * m10,
            100.0 * s10,
            100.0 * m100,
            100.0 * s100,
            if holds { "" } else { " (violated)" }
        ));
    }
    let detail = format!("MEM/scratch finetune top-1, {}; holds on {ok}/3 seeds", parts.join("; "));
    r.line(6, ok >= 2, "few-label ordering on a majority of seeds", detail, t.elapsed(), minutes(30));
}

fn emae_harness(r: &mut Report, base: &Pretrained) {
    let t = Instant::now();
    let mem = probe_top1(&base.vit, base);
    let mut finite = base.curve.iter().all(|row| row.loss.is_finite());
    let mut parts = vec![format!("mem {:.1}", 100.0 * mem)];
    let mut entire = f64::NAN;
    for objective in [Objective::EmaeEntire, Objective::EmaeOnlyMask] {
        let cfg = PretrainConfig { objective, seed: base.seed, ..Default::default() };
        let (vit, curve) = pretrain(None, &base.train, &cfg).unwrap();
        finite &= curve.iter().all(|row| row.loss.is_finite());
        let top1 = probe_top1(&vit, base);
        if objective == Objective::EmaeEntire {
            entire = top1;
        }
        parts.push(format!("{} {:.1}", objective.as_str(), 100.0 * top1));
    }
    let soft = if mem >= entire { "holds" } else { "does not hold (soft, non-gating)" };
    let detail = format!("probe top-1 {}; losses finite: {finite}; mem ≥ emae-entire {soft}", parts.join(", "));
    r.line(7, finite, "eMAE modes train without divergence", detail, t.elapsed(), None);
}

fn identities(r: &mut Report) {
    let t = Instant::now();
    let kl_zero = [2usize, 4, 16, 128, 8092, 8192].iter().all(|&n| kl_to_uniform(&vec![1.0 / n as f64; n]) == 0.0);
    let kl_onehot = [2usize, 7, 128, 8092].iter().all(|&n| {
        let mut q = vec![0.0; n];
        q[n / 2] = 1.0;
        (kl_to_uniform(&q) - (n as f64).ln()).abs() < 1e-12
    });
    let mut rng = rng_from_seed(3);
    let logits = Tensor::randn(&[32, 128], 3.0, &mut rng);
    let mut gumbel = true;
    for tau in [0.0625, 0.5, 1.0, 4.0] {
        for hard in [false, true] {
            let tape = Tape::new();
            let y = gumbel_softmax(tape.constant(logits.clone()), tau, &mut rng, hard).unwrap();
            gumbel &= y.value().data().chunks(128).all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let tape = Tape::new();
    let ce = tape.constant(Tensor::full(&[5, 128], 0.3)).cross_entropy(&[0, 17, 64, 127, 3]).unwrap().value().item();
    let ce_ok = (ce - 4.852030263919617).abs() < 1e-12;
    let detail = format!(
        "KL uniform = 0: {kl_zero}, KL one-hot = ln N: {kl_onehot}, Gumbel rows sum to 1: {gumbel}, uniform CE {ce:.15}"
    );
    r.line(8, kl_zero && kl_onehot && gumbel && ce_ok, "KL and cross-entropy identities", detail, t.elapsed(), minutes(1));
}

fn segmentation(r: &mut Report) {
    let t = Instant::now();
    let m = seg_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
    let hand = (m.a_acc - 0.75).abs() < 1e-9 && (m.m_acc - 0.75).abs() < 1e-9 && (m.m_iou - 7.0 / 12.0).abs() < 1e-9;
    let mut rng = rng_from_seed(11);
    let agree = (0..500)
        .filter(|_| {
            let (pred, truth, k) = random_seg_maps(&mut rng);
            let m = seg_metrics(&pred, &truth, k);
            let (a, ma, mi) = seg_brute_force(&pred, &truth, k);
            (m.a_acc - a).abs() < 1e-9 && (m.m_acc - ma).abs() < 1e-9 && (m.m_iou - mi).abs() < 1e-9
        })
        .count();
    let detail = format!(
        "hand example aAcc {:.4} mAcc {:.4} mIoU {:.4}; {agree}/500 random 8×8 maps match brute force",
        m.a_acc, m.m_acc, m.m_iou
    );
    r.line(9, hand && agree == 500, "segmentation metrics oracle", detail, t.elapsed(), minutes(1));
}

fn tiny_runs(seed: u64) -> (String, Vec<u8>, String, Vec<u8>) {
    let ds = gen_dataset(2, 16, seed, &SynthConfig::default());
    let (train, _) = sources(&ds);
    let dc = DvaeTrainConfig { steps: 20, seed, ..Default::default() };
    let (dvae, dcurve) = train_dvae(&train, &dc).unwrap();
    let model = VitConfig { dim: 32, depth: 2, heads: 2, mlp_dim: 64, ..VitConfig::desk() };
    let pc = PretrainConfig { model, steps: 10, warmup_steps: 2, seed, ..Default::default() };
    let (vit, pcurve) = pretrain(Some(&dvae), &train, &pc).unwrap();
    (loss_curve_csv(&dcurve), dvae.params.to_bytes(), pretrain_curve_csv(&pcurve), vit.params.to_bytes())
}

fn determinism_and_formats(r: &mut Report) {
    let t = Instant::now();
    let identical = tiny_runs(4) == tiny_runs(4);
    let differs = tiny_runs(4).3 != tiny_runs(5).3;

    let mut rng = rng_from_seed(10);
    let mut evt_ok = true;
    for _ in 0..500 {
        let s = random_stream(&mut rng);
        let bytes = write_evt(&s);
        evt_ok &= parse_evt(&bytes).is_ok_and(|back| back == s && write_evt(&back) == bytes);
        evt_ok &= parse_csv(&write_csv(&s)).is_ok_and(|back| back == s);
    }
    let mut ckpt_ok = true;
    for i in 0..200 {
        let mut store = ParamStore::new();
        for j in 0..rng.random_range(0..5) {
            let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..5)).collect();
            let mut t = Tensor::randn(&shape, 1e3, &mut rng);
            if let Some(v) = t.data_mut().first_mut() {
                *v = [f64::NAN, f64::INFINITY, -0.0, f64::MIN_POSITIVE][(i + j) % 4];
            }
            store.add(format!("p{j}.w"), t);
        }
        let bytes = store.to_bytes();
        ckpt_ok &= ParamStore::from_bytes(&bytes).is_ok_and(|back| back.to_bytes() == bytes);
    }

    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut rng = rng_from_seed(7);
    let crashes = (0..100_000)
        .filter(|_| {
            let bytes = fuzz_input(&mut rng);
            panic::catch_unwind(|| parse_everything(&bytes)).is_err()
        })
        .count();
    panic::set_hook(hook);

    let detail = format!(
        "same seed identical curves and checkpoints: {identical}, other seed differs: {differs}, \
         .evt/.csv roundtrips: {evt_ok}, checkpoint roundtrips: {ckpt_ok}, fuzz crashes {crashes}/100000"
    );
    let pass = identical && differs && evt_ok && ckpt_ok && crashes == 0;
    r.line(10, pass, "determinism and formats", detail, t.elapsed(), minutes(5));
}

fn main() {
    let start = Instant::now();
    let mut r = Report { gating_failures: Vec::new() };
    gradients(&mut r);
    histograms(&mut r);
    hot_pixels(&mut r);
    dvae_gate(&mut r);
    let runs = probe_gap(&mut r);
    few_labels(&mut r, &runs);
    emae_harness(&mut r, &runs[0]);
    identities(&mut r);
    segmentation(&mut r);
    determinism_and_formats(&mut r);
    let failed = &r.gating_failures;
    println!(
        "acceptance: {}/10 criteria passed{} in {:.0}s",
        10 - failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (failed: {failed:?})") },
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var_os("MEM_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}

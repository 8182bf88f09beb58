//! Independent oracles shared by the integration tests and the acceptance
//! run.
#![allow(dead_code)]

use mem_core::dvae::{self, DvaeConfig, DvaeModel};
use mem_core::event_io::{parse_csv, parse_evt, Event, EventStream, Polarity, EVT_HEADER_LEN};
use mem_core::histogram::*;
use mem_core::rng_from_seed;
use mem_core::tensor::{grad_check, ParamStore, Tape, Tensor, TensorError, Var};
use mem_core::vit::{self, MaskSet, VitConfig, VitModel};
use rand::Rng;

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_from_seed(seed))
}

/// Random values at least `gap` away from every point in `kinks`.
pub fn away_from(shape: &[usize], seed: u64, kinks: &[f64], gap: f64) -> Tensor {
    let mut t = randn(shape, seed);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + gap.copysign(*v - k + f64::MIN_POSITIVE);
            }
        }
    }
    t
}

/// `Σ w ⊙ out` with fixed random weights, so every output element carries
/// an O(1) gradient.
pub fn weighted<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let w = out.tape().constant(randn(&out.shape(), seed ^ 0x9e37));
    Ok(out.mul(w)?.sum())
}

pub fn check<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    grad_check(f, inputs, FD_EPS).expect("forward succeeds")
}

/// Max relative FD error of every differentiable op at base shape `r × c`.
/// Secondary sizes are drawn from `seed` and stay ≤ 6.
pub fn op_errors(r: usize, c: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng_from_seed(seed);
    let (n, b, d) = (rng.random_range(1..=6), rng.random_range(1..=3), rng.random_range(1..=4));
    let mut out = Vec::new();
    let a = randn(&[r, c], seed);
    let a2 = randn(&[r, c], seed + 1);
    let row = randn(&[c], seed + 1);
    for (name, other) in [("add", &a2), ("add broadcast", &row)] {
        out.push((name, check(|_, v| weighted(v[0].add(v[1])?, seed), &[a.clone(), other.clone()])));
    }
    for (name, other) in [("sub", &a2), ("sub broadcast", &row)] {
        out.push((name, check(|_, v| weighted(v[0].sub(v[1])?, seed), &[a.clone(), other.clone()])));
    }
    for (name, other) in [("mul", &a2), ("mul broadcast", &row)] {
        out.push((name, check(|_, v| weighted(v[0].mul(v[1])?, seed), &[a.clone(), other.clone()])));
    }
    out.push(("scale", check(|_, v| weighted(v[0].scale(-1.7), seed), &[a.clone()])));
    out.push(("add_scalar", check(|_, v| weighted(v[0].add_scalar(0.3), seed), &[a.clone()])));
    out.push(("sum", check(|_, v| Ok(v[0].sum()), &[a.clone()])));
    out.push(("mean", check(|_, v| Ok(v[0].mean()), &[a.clone()])));

    let w = randn(&[c, n], seed + 2);
    out.push(("matmul", check(|_, v| weighted(v[0].matmul(v[1])?, seed), &[a.clone(), w.clone()])));
    let xb = randn(&[b, r, c], seed + 3);
    out.push(("matmul batched×shared", check(|_, v| weighted(v[0].matmul(v[1])?, seed), &[xb.clone(), w])));
    let wb = randn(&[b, c, n], seed + 4);
    out.push(("matmul batched", check(|_, v| weighted(v[0].matmul(v[1])?, seed), &[xb, wb])));

    let t3 = randn(&[r, c, d], seed + 5);
    out.push(("permute", check(|_, v| weighted(v[0].permute(&[2, 0, 1])?, seed), &[t3.clone()])));
    out.push(("transpose", check(|_, v| weighted(v[0].transpose()?, seed), &[t3.clone()])));
    out.push(("reshape", check(|_, v| weighted(v[0].reshape(&[r * c, d])?, seed), &[t3.clone()])));
    let start = seed as usize % c;
    out.push(("narrow", check(|_, v| weighted(v[0].narrow(1, start, c - start)?, seed), &[t3.clone()])));
    let side = randn(&[r, 2, d], seed + 6);
    out.push(("concat", check(|_, v| weighted(Var::concat(&[v[0], v[1]], 1)?, seed), &[t3.clone(), side])));
    let ids: Vec<usize> = (0..5).map(|i| (seed as usize + 3 * i) % r).collect();
    out.push(("index_select", check(|_, v| weighted(v[0].index_select(&ids)?, seed), &[t3])));

    for axis in 0..2 {
        out.push(("sum_axis", check(|_, v| weighted(v[0].sum_axis(axis)?, seed), &[a.clone()])));
        out.push(("mean_axis", check(|_, v| weighted(v[0].mean_axis(axis)?, seed), &[a.clone()])));
    }
    out.push(("softmax", check(|_, v| weighted(v[0].softmax()?, seed), &[a.clone()])));
    out.push(("log_softmax", check(|_, v| weighted(v[0].log_softmax()?, seed), &[a.clone()])));
    out.push(("layer_norm eps 1e-2", check(|_, v| weighted(v[0].layer_norm(1e-2)?, seed), &[a.clone()])));
    // Two-element rows normalize to ±1 and have a vanishing gradient, so
    // the small-eps check starts at three columns.
    if c >= 3 {
        out.push(("layer_norm eps 1e-6", check(|_, v| weighted(v[0].layer_norm(1e-6)?, seed), &[a.clone()])));
    }

    out.push(("gelu", check(|_, v| weighted(v[0].gelu(), seed), &[a.clone()])));
    out.push(("exp", check(|_, v| weighted(v[0].exp(), seed), &[a.clone()])));
    out.push(("ln", check(|_, v| weighted(v[0].ln(), seed), &[a.map(|x| x.abs() + 0.1)])));
    let kinked = away_from(&[r, c], seed, &[0.0], 1e-3);
    out.push(("relu", check(|_, v| weighted(v[0].relu(), seed), &[kinked])));
    let clamped = away_from(&[r, c], seed, &[-0.5, 0.5], 1e-3);
    out.push(("clamp", check(|_, v| weighted(v[0].clamp(-0.5, 0.5), seed), &[clamped])));

    let targets: Vec<usize> = (0..r).map(|i| (seed as usize + i) % c).collect();
    out.push(("cross_entropy", check(|_, v| v[0].cross_entropy(&targets), &[a.clone()])));
    out.push(("mse", check(|_, v| v[0].mse(v[1]), &[a, a2])));
    out
}

fn dvae_err(e: dvae::DvaeError) -> TensorError {
    match e {
        dvae::DvaeError::Tensor(t) => t,
        other => TensorError::InvalidArgument(other.to_string()),
    }
}

/// FD error of the full soft-path dVAE ELBO against every model parameter.
pub fn composed_dvae_error() -> f64 {
    let cfg = DvaeConfig {
        layout: ChannelLayout::TwoPolarity,
        height: 16,
        width: 16,
        patch: 8,
        hidden: 6,
        vocab: 5,
        latent: 3,
    };
    let model = DvaeModel::new(cfg, &mut rng_from_seed(11)).unwrap();
    let mut rng = rng_from_seed(12);
    let mut hist = EventHistogram::zeros(ChannelLayout::TwoPolarity, 16, 16);
    hist.values.iter_mut().for_each(|v| *v = rng.random::<f64>());
    let x = dvae::patchify(&hist, 8).unwrap();
    let noise = dvae::sample_gumbel(&[4, 5], &mut rng);
    check(
        |tape, params| {
            let input = tape.constant(x.clone());
            let logits = model.encode_var(params, input).map_err(dvae_err)?;
            let z = dvae::gumbel_softmax_with_noise(logits, 0.7, &noise, false).map_err(dvae_err)?;
            let recon = model.decode_raw_var(params, z).map_err(dvae_err)?;
            let (loss, _) = dvae::elbo_loss(input, recon, logits, 1.0).map_err(dvae_err)?;
            Ok(loss)
        },
        model.params.values(),
    )
}

/// FD error of the masked-token loss of a 2-block ViT against every
/// parameter.
pub fn composed_mem_error() -> f64 {
    let cfg = VitConfig {
        layout: ChannelLayout::TwoPolarity,
        height: 8,
        width: 12,
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_dim: 12,
        vocab: 5,
        pixel_head: false,
    };
    let mut model = VitModel::new(cfg, &mut rng_from_seed(21)).unwrap();
    // Larger weights than the 0.02 init so every path carries signal.
    let mut rng = rng_from_seed(22);
    for t in model.params.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.random::<f64>() - 0.15);
    }
    let mut hist = EventHistogram::zeros(ChannelLayout::TwoPolarity, 8, 12);
    hist.values.iter_mut().for_each(|v| *v = rng.random::<f64>());
    let x = model.batch_input(&[hist]).unwrap();
    let tokens = vec![0, 3, 1, 4, 2, 2];
    let masks = vec![MaskSet::new(6, vec![1, 3, 4]).unwrap()];
    check(
        |tape, params| {
            let input = tape.constant(x.clone());
            let (loss, _) = vit::mem_loss_var(&model, params, input, &tokens, &masks).map_err(|e| match e {
                vit::VitError::Tensor(t) => t,
                other => TensorError::InvalidArgument(other.to_string()),
            })?;
            Ok(loss)
        },
        model.params.values(),
    )
}

pub fn random_stream(rng: &mut impl Rng) -> EventStream {
    let w = rng.random_range(1..40u16);
    let h = rng.random_range(1..40u16);
    let n = rng.random_range(0..400);
    let mut t = rng.random_range(0..1_000u64);
    let events = (0..n)
        .map(|_| {
            // repeated timestamps are allowed and exercise the tie handling
            t += rng.random_range(0..50u64);
            let p = if rng.random_bool(0.5) { Polarity::On } else { Polarity::Off };
            Event::new(t, rng.random_range(0..w), rng.random_range(0..h), p)
        })
        .collect();
    EventStream::new(w, h, events).unwrap()
}

struct Naive {
    counts: Vec<[f64; 2]>,
    latest: Vec<f64>,
    slices: Vec<[[f64; 2]; 4]>,
}

/// Per-event loop written without the library's helpers.
fn naive(stream: &EventStream, n_max: usize) -> Naive {
    let n = stream.width as usize * stream.height as usize;
    let mut out = Naive { counts: vec![[0.0; 2]; n], latest: vec![0.0; n], slices: vec![[[0.0; 2]; 4]; n] };
    let used: Vec<&Event> = stream.events.iter().take(n_max).collect();
    let (t0, t1) = match (used.first(), used.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return out,
    };
    for e in used {
        let p = e.y as usize * stream.width as usize + e.x as usize;
        let c = if e.polarity == Polarity::On { 0 } else { 1 };
        out.counts[p][c] += 1.0;
        let frac = if t1 > t0 { (e.t - t0) as f64 / (t1 - t0) as f64 } else { 1.0 };
        out.latest[p] = frac;
        let chunk = if t1 > t0 { ((frac * 4.0).floor() as usize).min(3) } else { 0 };
        out.slices[p][chunk][c] += 1.0;
    }
    out
}

/// First disagreement between the library layouts and the naive loop, if
/// any. Also checks that the 8-channel slices sum bit-exactly to c2.
pub fn histogram_mismatch(s: &EventStream, n_max: usize) -> Option<String> {
    let o = naive(s, n_max);
    let (h, w) = (s.height as usize, s.width as usize);
    let c2 = build_histogram(s, n_max);
    let c3 = add_timestamp_channel(s, n_max);
    let c8 = build_time_slices(s, n_max);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for c in 0..2 {
                if c2.get(c, y, x) != o.counts[p][c] || c3.get(c, y, x) != o.counts[p][c] {
                    return Some(format!("count at ({c},{y},{x})"));
                }
                let sum: f64 = (0..4).map(|k| c8.get(2 * k + c, y, x)).sum();
                if sum.to_bits() != c2.get(c, y, x).to_bits() {
                    return Some(format!("slice sum at ({c},{y},{x})"));
                }
                if (0..4).any(|k| c8.get(2 * k + c, y, x) != o.slices[p][k][c]) {
                    return Some(format!("slice at ({c},{y},{x})"));
                }
            }
            if c3.get(2, y, x) != o.latest[p] {
                return Some(format!("timestamp at ({y},{x})"));
            }
        }
    }
    None
}

/// Random 32×32 counts with one pixel set to 100× the mean total.
/// Returns the histogram and the hot pixel.
pub fn with_hot_pixel(seed: u64) -> (EventHistogram, (usize, usize)) {
    let mut rng = rng_from_seed(seed);
    let mut hist = EventHistogram::zeros(ChannelLayout::TwoPolarity, 32, 32);
    for v in &mut hist.values {
        *v = rng.random_range(0..6) as f64;
    }
    let (y, x) = (rng.random_range(0..32), rng.random_range(0..32));
    let mean = hist.pixel_totals().iter().sum::<f64>() / 1024.0;
    hist.set(0, y, x, 100.0 * mean);
    hist.set(1, y, x, 0.0);
    (hist, (y, x))
}

/// Whether `out` zeroes `hot` in every channel and leaves the rest of `hist`
/// unchanged.
pub fn only_hot_pixel_removed(hist: &EventHistogram, out: &EventHistogram, hot: (usize, usize)) -> bool {
    (0..hist.channels()).all(|c| {
        (0..hist.height).all(|y| {
            (0..hist.width).all(|x| {
                if (y, x) == hot {
                    out.get(c, y, x) == 0.0
                } else {
                    out.get(c, y, x) == hist.get(c, y, x)
                }
            })
        })
    })
}

/// Set-based reference: per class, compare the pixel sets directly.
/// Returns (aAcc, mAcc, mIoU).
pub fn seg_brute_force(pred: &[usize], truth: &[usize], k: usize) -> (f64, f64, f64) {
    let n = pred.len();
    let correct = (0..n).filter(|&i| pred[i] == truth[i]).count();
    let (mut recalls, mut ious) = (Vec::new(), Vec::new());
    for c in 0..k {
        let t: Vec<usize> = (0..n).filter(|&i| truth[i] == c).collect();
        let p: Vec<usize> = (0..n).filter(|&i| pred[i] == c).collect();
        let inter = t.iter().filter(|i| p.contains(i)).count();
        let union = (0..n).filter(|i| t.contains(i) || p.contains(i)).count();
        if !t.is_empty() {
            recalls.push(inter as f64 / t.len() as f64);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (correct as f64 / n as f64, mean(&recalls), mean(&ious))
}

/// A random `k`-class 8×8 map pair where the prediction agrees with the
/// truth about 60 % of the time.
pub fn random_seg_maps(rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>, usize) {
    let k = rng.random_range(2..6);
    let truth: Vec<usize> = (0..64).map(|_| rng.random_range(0..k)).collect();
    let pred = (0..64).map(|i| if rng.random_bool(0.6) { truth[i] } else { rng.random_range(0..k) }).collect();
    (pred, truth, k)
}

/// Random byte strings, half of them starting with a valid header.
pub fn fuzz_input(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.random_range(0..96);
    let mut bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
    if rng.random_bool(0.5) && bytes.len() >= EVT_HEADER_LEN {
        bytes[..4].copy_from_slice(b"EVT1");
        if rng.random_bool(0.5) {
            let n = ((bytes.len() - EVT_HEADER_LEN) / 13) as u64;
            bytes[8..16].copy_from_slice(&n.to_le_bytes());
        }
    }
    bytes
}

/// Feeds `bytes` to every parser. Anything the event parser accepts must
/// validate.
pub fn parse_everything(bytes: &[u8]) {
    if let Ok(s) = parse_evt(bytes) {
        assert!(s.validate().is_ok());
    }
    let _ = parse_csv(&String::from_utf8_lossy(bytes));
    let _ = ParamStore::from_bytes(bytes);
}

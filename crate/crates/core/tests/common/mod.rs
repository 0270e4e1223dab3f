//! Suites shared by the focused integration tests and the acceptance run.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use promptir::blocks::{BlockConfig, Conv, ConvSpec, Gdfn, Init, LayerNorm, Mdta};
use promptir::error::Result;
use promptir::gradcheck::{check_gradients, GradCheckOptions};
use promptir::metrics::{psnr, ssim, PSNR_CAP_DB};
use promptir::network::{ModelConfig, PromptIr};
use promptir::prompt::{PgmMode, PromptBlock, PromptConfig};
use promptir::rng;
use promptir::tensor::{ParamStore, Tape, Tensor, Var};
use promptir::train::{adam_step, AdamConfig, AdamState};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 5;
pub const SUM_TOL: f64 = 1e-9;
pub const PSNR_TOL: f64 = 1e-9;
pub const SSIM_TOL: f64 = 1e-6;
pub const ADAM_TOL: f64 = 1e-12;

pub fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng::stream(seed, 0))
}

/// Nudges every parameter by up to ±0.1 so zero-initialised biases and
/// unit scales are tested away from their special values.
fn jitter(store: &mut ParamStore, seed: u64) {
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let noise = uniform(
            rng::derive(seed, &format!("jitter/{i}")),
            p.shape(),
            -0.1,
            0.1,
        );
        p.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(v, n)| *v += n);
    }
}

/// Checks `build`'s output against a random linear probe, with the input
/// registered as a parameter so its gradient is checked too.
fn check_block<F>(
    seed: u64,
    input_shape: &[usize],
    per_param: usize,
    build: impl FnOnce(&mut ParamStore, &Init) -> F,
) -> f64
where
    F: Fn(&mut Tape, &ParamStore, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let f = build(&mut store, &Init::new(seed));
    jitter(&mut store, seed);
    let x = store
        .insert(
            "input",
            uniform(rng::derive(seed, "x"), input_shape, -1.0, 1.0),
        )
        .unwrap();
    let probe_seed = rng::derive(seed, "probe");
    let report = check_gradients(
        &mut store,
        |t, s| {
            let xv = t.param(s, x);
            let y = f(t, s, xv)?;
            let p = t.constant(uniform(probe_seed, t.shape(y), -1.0, 1.0));
            let yp = t.mul(y, p)?;
            Ok(t.sum(yp))
        },
        &GradCheckOptions {
            max_per_param: Some(per_param),
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

/// Worst relative error per component over `GRAD_SEEDS` seeds.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let block = BlockConfig::new(4, 2, 2.66);
    let prompt_cfg = |mode| PromptConfig {
        feature_channels: 4,
        prompt_channels: 4,
        components: 3,
        canvas: 3,
        mode,
        interaction_heads: 2,
        expansion: 2.66,
        normalize_qk: true,
    };
    type Case = (&'static str, Box<dyn Fn(u64) -> f64>);
    let cases: Vec<Case> = vec![
        (
            "conv",
            Box::new(|s| {
                check_block(s, &[2, 4, 5, 6], 12, |st, init| {
                    let dense =
                        Conv::new(st, "dense", ConvSpec::dense3(4, 6).with_bias(), init).unwrap();
                    let dw = Conv::new(st, "dw", ConvSpec::depthwise3(6), init).unwrap();
                    let pw =
                        Conv::new(st, "pw", ConvSpec::pointwise(6, 3).with_bias(), init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| {
                        let y = dense.forward(t, st, x)?;
                        let y = dw.forward(t, st, y)?;
                        pw.forward(t, st, y)
                    }
                })
            }),
        ),
        (
            "layer_norm",
            Box::new(|s| {
                check_block(s, &[2, 5, 3, 4], 20, |st, _| {
                    let ln = LayerNorm::new(st, "ln", 5).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| ln.forward(t, st, x)
                })
            }),
        ),
        (
            "gelu",
            Box::new(|s| {
                check_block(s, &[1, 3, 4, 4], 48, |_, _| {
                    |t: &mut Tape, _: &ParamStore, x| Ok(t.gelu(x))
                })
            }),
        ),
        (
            "softmax",
            Box::new(|s| {
                check_block(s, &[2, 3, 5], 30, |_, _| {
                    |t: &mut Tape, _: &ParamStore, x| t.softmax(x, 2)
                })
            }),
        ),
        (
            "bilinear",
            Box::new(|s| {
                check_block(s, &[1, 2, 3, 4], 24, |_, _| {
                    |t: &mut Tape, _: &ParamStore, x| t.bilinear_resize(x, 7, 5)
                })
            }),
        ),
        (
            "mdta",
            Box::new(move |s| {
                check_block(s, &[1, 4, 4, 5], 8, |st, init| {
                    let m = Mdta::new(st, "mdta", &block, init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| m.forward(t, st, x)
                })
            }),
        ),
        (
            "gdfn",
            Box::new(move |s| {
                check_block(s, &[1, 4, 4, 5], 8, |st, init| {
                    let g = Gdfn::new(st, "gdfn", &block, init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| g.forward(t, st, x)
                })
            }),
        ),
        (
            "pgm",
            Box::new(move |s| {
                check_block(s, &[2, 4, 5, 4], 8, |st, init| {
                    let p = PromptBlock::new(st, "p", prompt_cfg(PgmMode::Dynamic), init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| Ok(p.pgm(t, st, x)?.prompt)
                })
            }),
        ),
        (
            "pim",
            Box::new(move |s| {
                check_block(s, &[1, 8, 4, 4], 8, |st, init| {
                    let p = PromptBlock::new(st, "p", prompt_cfg(PgmMode::Dynamic), init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| {
                        let f = t.slice_channels(x, 0, 4)?;
                        let q = t.slice_channels(x, 4, 4)?;
                        p.pim(t, st, f, q)
                    }
                })
            }),
        ),
        (
            "prompt_block",
            Box::new(move |s| {
                check_block(s, &[2, 4, 4, 3], 6, |st, init| {
                    let p = PromptBlock::new(st, "p", prompt_cfg(PgmMode::Dynamic), init).unwrap();
                    move |t: &mut Tape, st: &ParamStore, x| Ok(p.forward(t, st, x)?.0)
                })
            }),
        ),
        ("full_model", Box::new(full_model_check)),
    ];
    cases
        .iter()
        .map(|(name, run)| {
            let worst = (0..GRAD_SEEDS).map(|s| run(100 + s)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}

fn full_model_check(seed: u64) -> f64 {
    let cfg = ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    };
    let mut model = PromptIr::new(cfg, seed).unwrap();
    jitter(model.params_mut(), seed);
    let input = uniform(rng::derive(seed, "x"), &[1, 3, 10, 12], 0.0, 1.0);
    let probe = uniform(rng::derive(seed, "probe"), &[1, 3, 10, 12], -1.0, 1.0);
    let net = model.clone();
    let report = check_gradients(
        model.params_mut(),
        |t, s| {
            let x = t.constant(input.clone());
            let y = net.forward_with(t, s, x)?.restored;
            let p = t.constant(probe.clone());
            let yp = t.mul(y, p)?;
            Ok(t.sum(yp))
        },
        &GradCheckOptions {
            max_per_param: Some(2),
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    report.max_rel_error
}

/// `(H, W)` pairs covering every size in 8..=64 on both axes.
pub fn shape_grid() -> Vec<(usize, usize)> {
    (8..=64).map(|h| (h, 72 - h)).collect()
}

/// Runs the shape and normalisation checks; returns the first violation.
pub fn shape_suite() -> std::result::Result<usize, String> {
    let model = PromptIr::new(ModelConfig::default(), 7).unwrap();
    let mut checked = 0;
    for (h, w) in shape_grid() {
        let x = uniform(rng::derive(h as u64, "shape"), &[1, 3, h, w], 0.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model
            .forward(&mut tape, xv)
            .map_err(|e| format!("{h}x{w}: {e}"))?;
        if tape.shape(out.restored) != [1, 3, h, w] {
            return Err(format!("{h}x{w}: output {:?}", tape.shape(out.restored)));
        }
        for (level, wv) in &out.prompt_weights {
            for row in tape
                .value(*wv)
                .data()
                .chunks(model.config().num_prompt_components)
            {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(format!("{h}x{w} level {level}: weights sum to {s}"));
                }
            }
        }
        checked += 1;
    }
    let mut tape = Tape::new();
    let logits = tape.constant(uniform(3, &[4, 6, 9], -20.0, 20.0));
    let sm = tape.softmax(logits, 2).unwrap();
    for row in tape.value(sm).data().chunks(9) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(format!("softmax row sums to {s}"));
        }
    }
    let x = uniform(5, &[2, 8, 6, 10], -1.0, 1.0);
    let xv = tape.constant(x.clone());
    let down = tape.pixel_unshuffle(xv, 2).unwrap();
    let up = tape.pixel_shuffle(down, 2).unwrap();
    if tape.value(up) != &x.detached() {
        return Err("pixel unshuffle/shuffle round trip changed values".into());
    }
    Ok(checked)
}

/// Mean-squared-error PSNR written out element by element.
pub fn brute_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut sse = 0.0;
    for i in 0..a.len() {
        sse += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// SSIM with an explicit 2-D Gaussian window evaluated at every valid
/// position, averaged over channels.
pub fn brute_ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0; k * k];
    let r = (k / 2) as f64;
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            win[y * k + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut acc = 0.0;
    for ch in 0..c {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        let mut plane = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let g = win[y * k + x];
                        let (va, vb) = (pa[(oy + y) * w + ox + x], pb[(oy + y) * w + ox + x]);
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                plane += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += plane / count as f64;
    }
    acc / c as f64
}

/// Largest PSNR and SSIM deviations from the brute-force versions over
/// 50 random 16×16 RGB pairs.
pub fn metric_oracle() -> (f64, f64) {
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for i in 0..50u64 {
        let a = uniform(rng::derive(i, "a"), &[3, 16, 16], 0.0, 1.0);
        let noise = uniform(rng::derive(i, "n"), &[3, 16, 16], -0.2, 0.2);
        let b: Vec<f64> = a
            .data()
            .iter()
            .zip(noise.data())
            .map(|(x, n)| (x + n).clamp(0.0, 1.0))
            .collect();
        let b = Tensor::new(&[3, 16, 16], b).unwrap();
        dp = dp.max((psnr(&a, &b, 1.0).unwrap() - brute_psnr(a.data(), b.data())).abs());
        ds = ds.max((ssim(&a, &b, 1.0).unwrap() - brute_ssim(a.data(), b.data(), 3, 16, 16)).abs());
    }
    (dp, ds)
}

/// Largest deviation between `adam_step` and a scalar Adam loop over 100
/// steps on f(w) = Σ c_i (w_i − t_i)² + sin(w_i).
pub fn adam_oracle() -> f64 {
    let n = 7;
    let c: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.3).collect();
    let target: Vec<f64> = (0..n).map(|i| (i as f64 - 3.0) * 0.4).collect();
    let grad = |w: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| 2.0 * c[i] * (w[i] - target[i]) + w[i].cos())
            .collect()
    };
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let w0: Vec<f64> = (0..n).map(|i| 1.0 - 0.25 * i as f64).collect();
    let mut store = ParamStore::new();
    let id = store
        .insert("w", Tensor::new(&[n], w0.clone()).unwrap())
        .unwrap();
    let mut state = AdamState::new(&store);

    let mut w = w0;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut worst = 0.0f64;
    for t in 1..=100 {
        let g = grad(&w);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        let g = grad(store.get(id).data());
        store.get_mut(id).accumulate_grad(&g);
        adam_step(&mut store, &mut state, &cfg).unwrap();
        for (a, b) in store.get(id).data().iter().zip(&w) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

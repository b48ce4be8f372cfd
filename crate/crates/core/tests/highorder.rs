mod common;

use candle_core::DType;
use common::*;
use mha_unet::highorder::{
    channel_schedule, GlobalLocalFilter, HaBlock, HighOrderInteraction, InteractionConfig,
    SqueezeAttention,
};
use mha_unet::spectral::SpectralBasis;
use mha_unet::{Error, ParamBuilder};
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn builder(seed: u64) -> ParamBuilder {
    ParamBuilder::new(seed, DType::F64, &cpu())
}

#[test]
fn schedule_table() {
    for n in 1..=5 {
        for c in [16, 32, 64, 128, 256] {
            let s = channel_schedule(n, c).unwrap();
            assert_eq!(s.len(), n);
            assert_eq!(*s.last().unwrap(), c);
            assert_eq!(s[0] + s.iter().sum::<usize>(), 2 * c, "n={n} C={c}");
        }
    }
    assert!(matches!(channel_schedule(5, 24), Err(Error::Config(_))));
    assert!(matches!(channel_schedule(2, 7), Err(Error::Config(_))));
}

#[test]
fn projection_widths_follow_schedule() {
    let pb = builder(0);
    let ha = HighOrderInteraction::new(&pb, InteractionConfig::new(4, 32, (8, 8)).unwrap()).unwrap();
    let (x0, ys) = ha.input_projection(&randn(&[1, 32, 8, 8], 1)).unwrap();
    assert_eq!(x0.dim(1).unwrap(), 4);
    let widths: Vec<usize> = ys.iter().map(|y| y.dim(1).unwrap()).collect();
    assert_eq!(widths, vec![4, 8, 16, 32]);
    for (k, p) in ha.projections().iter().enumerate() {
        assert_eq!(p.in_channels(), widths[k]);
        assert_eq!(p.out_channels(), widths.get(k + 1).copied().unwrap_or(32));
    }
}

/// Unit filter with identity mixing: the global half passes through untouched.
fn identity_glf(channels: usize, h: usize, w: usize) -> GlobalLocalFilter {
    let glf = GlobalLocalFilter::new(&builder(3), channels, (h, w)).unwrap();
    fill_var(glf.filter_re(), 1.0);
    fill_var(glf.filter_im(), 0.0);
    let mut eye = vec![0.0; channels * channels];
    for i in 0..channels {
        eye[i * channels + i] = 1.0;
    }
    set_var(glf.mix().weight(), eye);
    fill_var(glf.mix().bias().unwrap(), 0.0);
    glf
}

#[test]
fn unit_filter_is_identity_on_global_half() {
    let glf = identity_glf(8, 16, 16);
    for seed in 0..100 {
        let x = randn(&[1, 8, 16, 16], seed);
        let y = glf.forward(&x).unwrap();
        let d = max_abs_diff(&y.narrow(1, 4, 4).unwrap(), &x.narrow(1, 4, 4).unwrap());
        assert!(d < 1e-10, "seed {seed}: {d}");
    }
}

#[test]
fn global_branch_matches_naive_dft() {
    let glf = GlobalLocalFilter::new(&builder(5), 4, (8, 8)).unwrap();
    // make the filter O(1) so differences are not hidden by the 0.02 init scale
    set_var(glf.filter_re(), vec64(&randn(&[2, 8, 5], 10)));
    set_var(glf.filter_im(), vec64(&randn(&[2, 8, 5], 11)));
    let x = randn(&[1, 2, 8, 8], 12);
    let got = glf.global_branch(&x).unwrap();
    let want = naive_global_filter(
        &Planes::from_tensor(&x.get(0).unwrap()),
        &vec64(glf.filter_re().as_tensor()),
        &vec64(glf.filter_im().as_tensor()),
    );
    let d = vec64(&got).iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-10, "{d}");
}

#[test]
fn global_branch_matches_rustfft_on_odd_and_even_grids() {
    for (h, w) in [(16, 16), (6, 10), (7, 9)] {
        let wf = w / 2 + 1;
        let f_re = randn(&[1, h, wf], 20);
        let f_im = randn(&[1, h, wf], 21);
        let x = randn(&[1, h, w], 22);
        let basis = SpectralBasis::new(h, w, DType::F64, &cpu()).unwrap();
        let got = vec64(&basis.filter(&x, &f_re, &f_im).unwrap());

        let (fr, fi, xv) = (vec64(&f_re), vec64(&f_im), vec64(&x));
        let mut planner = FftPlanner::<f64>::new();
        let mut buf: Vec<Complex<f64>> = xv.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2(&mut planner, &mut buf, h, w, false);
        for u in 0..h {
            for v in 0..w {
                let f = if v < wf {
                    Complex::new(fr[u * wf + v], fi[u * wf + v])
                } else {
                    let (uu, vv) = ((h - u) % h, w - v);
                    Complex::new(fr[uu * wf + vv], -fi[uu * wf + vv])
                };
                buf[u * w + v] = buf[u * w + v] * f / (h * w) as f64;
            }
        }
        fft2(&mut planner, &mut buf, h, w, true);
        let d = got.iter().zip(&buf).map(|(a, b)| (a - b.re).abs()).fold(0.0, f64::max);
        assert!(d < 1e-10, "{h}x{w}: {d}");
    }
}

fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = buf[r * w + c];
        }
        col.process(&mut column);
        for r in 0..h {
            buf[r * w + c] = column[r];
        }
    }
}

#[test]
fn glf_forward_matches_loop_reference() {
    let glf = GlobalLocalFilter::new(&builder(7), 6, (8, 8)).unwrap();
    let x = randn(&[1, 6, 8, 8], 30);
    let got = glf.forward(&x).unwrap();
    let p = Planes::from_tensor(&x.get(0).unwrap());
    let local = conv_ref(&p.channels(0, 3), glf.local_conv().unwrap());
    let global = naive_global_filter(
        &p.channels(3, 3),
        &vec64(glf.filter_re().as_tensor()),
        &vec64(glf.filter_im().as_tensor()),
    );
    let want = conv_ref(&local.concat(&global), glf.mix());
    let d = vec64(&got).iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-10, "{d}");
}

#[test]
fn filter_is_resampled_for_other_grids() {
    let glf = GlobalLocalFilter::new(&builder(8), 4, (16, 16)).unwrap();
    let y = glf.forward(&randn(&[2, 4, 8, 8], 1)).unwrap();
    assert_eq!(y.dims(), &[2, 4, 8, 8]);
    let (re, _) = glf.filter_for(8, 8).unwrap();
    assert_eq!(re.dims(), &[2, 8, 5]);
}

fn sa_reference(sa: &SqueezeAttention, x: &Planes) -> Planes {
    let (m1, m2) = sa.main_convs();
    let res = conv_ref(&conv_ref(x, m1).map(gelu), m2).map(gelu);
    let mut pooled = Planes::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for r in 0..x.h / 2 {
            for q in 0..x.w / 2 {
                let s = x.at(c, 2 * r, 2 * q) + x.at(c, 2 * r + 1, 2 * q) + x.at(c, 2 * r, 2 * q + 1) + x.at(c, 2 * r + 1, 2 * q + 1);
                pooled.set(c, r, q, s / 4.0);
            }
        }
    }
    let att = conv_ref(&pooled, sa.attention_conv());
    let mut out = Planes::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        for r in 0..x.h {
            for q in 0..x.w {
                let g = sigmoid(att.at(c, r / 2, q / 2));
                out.set(c, r, q, g * res.at(c, r, q) + g);
            }
        }
    }
    out
}

#[test]
fn squeeze_attention_matches_loop_reference() {
    let sa = SqueezeAttention::new(&builder(9), 3).unwrap();
    let x = randn(&[1, 3, 6, 8], 40);
    let got = sa.forward(&x).unwrap();
    let want = sa_reference(&sa, &Planes::from_tensor(&x.get(0).unwrap()));
    let d = vec64(&got).iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // the reference erf is accurate to ~1.5e-7
    assert!(d < 1e-6, "{d}");
}

#[test]
fn saturated_attention_gives_residual_plus_one() {
    let sa = SqueezeAttention::new(&builder(10), 4).unwrap();
    fill_var(sa.attention_conv().weight(), 0.0);
    fill_var(sa.attention_conv().bias().unwrap(), 1000.0);
    let x = randn(&[2, 4, 8, 8], 41);
    let out = sa.forward(&x).unwrap();
    let expected = (sa.main_path(&x).unwrap() + 1.0).unwrap();
    assert!(max_abs_diff(&out, &expected) < 1e-12);
}

#[test]
fn odd_spatial_size_is_a_shape_error() {
    let sa = SqueezeAttention::new(&builder(11), 2).unwrap();
    assert!(matches!(sa.forward(&randn(&[1, 2, 7, 8], 0)), Err(Error::Shape(_))));
}

#[test]
fn order_two_chain_matches_loop_reference() {
    let cfg = InteractionConfig::new(2, 4, (8, 8)).unwrap().with_alpha(2.5).unwrap();
    let ha = HighOrderInteraction::new(&builder(12), cfg).unwrap();
    let x = randn(&[1, 4, 8, 8], 50);
    let got = ha.forward(&x).unwrap();

    let p = Planes::from_tensor(&x.get(0).unwrap());
    let fused = conv_ref(&p, ha.proj_in());
    // schedule (2, 4): X0 = ch 0..2, Y0 = ch 2..4, Y1 = ch 4..8
    let (x0, y0, y1) = (fused.channels(0, 2), fused.channels(2, 2), fused.channels(4, 4));
    let glf = |k: usize, y: &Planes| {
        let f = &ha.filters()[k];
        let l = f.local_channels();
        let local = conv_ref(&y.channels(0, l), f.local_conv().unwrap());
        let global = naive_global_filter(
            &y.channels(l, y.c - l),
            &vec64(f.filter_re().as_tensor()),
            &vec64(f.filter_im().as_tensor()),
        );
        conv_ref(&local.concat(&global), f.mix())
    };
    let s1 = conv_ref(&x0.zip(&glf(0, &y0), |a, b| a * b), &ha.projections()[0]).map(|v| v / 2.5);
    let gate = sa_reference(&ha.attentions()[0], &s1);
    let s2 = conv_ref(&gate.zip(&glf(1, &y1), |a, b| a * b), &ha.projections()[1]).map(|v| v / 2.5);
    let want = conv_ref(&s2, ha.proj_out());
    let d = vec64(&got).iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d < 1e-6, "{d}");
}

#[test]
fn order_one_has_no_attention_and_n_steps_in_general() {
    for n in 1..=5 {
        let ha = HighOrderInteraction::new(&builder(13), InteractionConfig::new(n, 16, (8, 8)).unwrap()).unwrap();
        let (y, trace) = ha.forward_traced(&randn(&[1, 16, 8, 8], 2)).unwrap();
        assert_eq!(y.dims(), &[1, 16, 8, 8]);
        assert_eq!(trace.gating_steps, n);
        assert_eq!(trace.attention_calls, n - 1);
        assert_eq!(ha.attentions().len(), n - 1);
        assert_eq!(ha.filters().len(), n);
    }
}

#[test]
fn alpha_scales_the_pre_projection_state() {
    let make = |alpha: f64| {
        let cfg = InteractionConfig::new(1, 8, (8, 8)).unwrap().with_alpha(alpha).unwrap();
        HighOrderInteraction::new(&builder(14), cfg).unwrap()
    };
    let (a, b) = (make(1.0), make(4.0));
    for ha in [&a, &b] {
        fill_var(ha.projections()[0].bias().unwrap(), 0.0);
        fill_var(ha.proj_out().bias().unwrap(), 0.0);
    }
    let x = randn(&[1, 8, 8, 8], 3);
    let ya = a.forward(&x).unwrap();
    let yb = b.forward(&x).unwrap();
    assert!(max_abs_diff(&(yb * 4.0).unwrap(), &ya) < 1e-12);
    assert!(InteractionConfig::new(1, 8, (8, 8)).unwrap().with_alpha(0.0).is_err());
}

#[test]
fn ha_block_preserves_shape() {
    let blk = HaBlock::new(&builder(15), InteractionConfig::new(3, 16, (8, 8)).unwrap()).unwrap();
    let y = blk.forward(&randn(&[2, 16, 8, 8], 4)).unwrap();
    assert_eq!(y.dims(), &[2, 16, 8, 8]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transform_round_trip(h in 1usize..12, w in 1usize..12, seed in 0u64..1000) {
        let basis = SpectralBasis::new(h, w, DType::F64, &cpu()).unwrap();
        let x = randn(&[2, h, w], seed);
        let (re, im) = basis.rfft2(&x).unwrap();
        let back = basis.irfft2(&re, &im).unwrap();
        prop_assert!(max_abs_diff(&back, &x) < 1e-10);
    }

    #[test]
    fn schedule_widths_are_consistent(n in 1usize..=6, k in 1usize..=8) {
        let c = k << (n - 1);
        let s = channel_schedule(n, c).unwrap();
        prop_assert_eq!(s[0] + s.iter().sum::<usize>(), 2 * c);
        prop_assert!(s.windows(2).all(|p| p[1] == 2 * p[0]));
        if n > 1 {
            prop_assert!(channel_schedule(n, c + 1).is_err());
        }
    }

    #[test]
    fn ha_output_is_finite_and_shape_preserving(n in 1usize..=5, seed in 0u64..100) {
        let ha = HighOrderInteraction::new(&builder(seed), InteractionConfig::new(n, 16, (4, 4)).unwrap()).unwrap();
        let x = (randn(&[1, 16, 4, 4], seed) * 10.0).unwrap();
        let y = ha.forward(&x).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        prop_assert!(vec64(&y).iter().all(|v| v.is_finite()));
    }
}

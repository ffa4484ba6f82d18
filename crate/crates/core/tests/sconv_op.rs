use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sconv_core::layers::Parameterized;
use sconv_core::ops::{conv2d_backward_batch, conv2d_forward_batch, conv2d_forward, ConvGeometry};
use sconv_core::sconv::{
    gather_spatial, generate_offsets, generate_weight_mask, resize_spatial, sconv_backward, sconv_forward,
    spatial_project, OffsetField, ProjectedSpatial, SConvMode, SConvState, SpatialProjector, SpatialSource,
    PROJECTED_CHANNELS,
};
use sconv_core::Tensor;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], s: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-s..s))
}

fn rand_geom(rng: &mut ChaCha8Rng) -> ConvGeometry {
    let k = [1, 3, 5][rng.gen_range(0..3)];
    ConvGeometry::new(k, k, rng.gen_range(1..=2), rng.gen_range(0..=k / 2), rng.gen_range(1..=2)).unwrap()
}

fn projected(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ProjectedSpatial<f64> {
    let t = Tensor::from_fn(&[n, PROJECTED_CHANNELS, h, w], |_| rng.gen_range(0.0..1.0));
    ProjectedSpatial::new(t, SpatialSource::Depth).unwrap()
}

/// Randomises every parameter, including the zero-initialised ones.
fn randomise(s: &mut SConvState<f64>, rng: &mut ChaCha8Rng) {
    s.visit_params_mut(&mut |p| {
        let scale = if p.name.contains("eta.w") { 0.05 } else { 0.5 };
        p.value = rand_t(rng, p.value.shape(), scale);
    });
}

/// Direct bilinear evaluation with zero outside the plane.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    (1.0 - ly) * (1.0 - lx) * at(y0, x0)
        + (1.0 - ly) * lx * at(y0, x0 + 1.0)
        + ly * (1.0 - lx) * at(y0 + 1.0, x0)
        + ly * lx * at(y0 + 1.0, x0 + 1.0)
}

/// Per-pixel evaluation of the guided convolution from its definition.
fn naive_sconv(x: &Tensor<f64>, sp: &Tensor<f64>, s: &SConvState<f64>) -> Tensor<f64> {
    let (c_in, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let g = s.geom;
    let k = g.taps();
    let (oh, ow) = g.output_extent(h, w).unwrap();
    let c_out = s.out_channels();
    let grid = g.grid();
    let hid = s.f_hidden();
    let spd = sp.data();
    let mut y = Tensor::zeros(&[c_out, oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            // Offsets: naive convolution of the projected features with the offset generator.
            let mut off = vec![0.0; 2 * k];
            for (o, v) in off.iter_mut().enumerate() {
                *v = s.eta_b.value.data()[o];
                for c in 0..PROJECTED_CHANNELS {
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                let wv = s.eta_w.value.data()[((o * PROJECTED_CHANNELS + c) * g.kh + ki) * g.kw + kj];
                                *v += wv * spd[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
            // Centre of the kernel window in input coordinates.
            let cy = (oy * g.stride) as f64 - g.padding as f64 + ((g.kh - 1) / 2 * g.dilation) as f64;
            let cx = (ox * g.stride) as f64 - g.padding as f64 + ((g.kw - 1) / 2 * g.dilation) as f64;
            let pos: Vec<(f64, f64)> = (0..k)
                .map(|i| (cy + grid[i][0] as f64 + off[2 * i], cx + grid[i][1] as f64 + off[2 * i + 1]))
                .collect();
            let mut gathered = Vec::with_capacity(PROJECTED_CHANNELS * k);
            for &(py, px) in &pos {
                for c in 0..PROJECTED_CHANNELS {
                    gathered.push(bilinear(&spd[c * h * w..(c + 1) * h * w], h, w, py, px));
                }
            }
            let hidden: Vec<f64> = (0..hid)
                .map(|j| {
                    let z: f64 = s.f0_b.value.data()[j]
                        + (0..gathered.len()).map(|q| s.f0_w.value.data()[j * gathered.len() + q] * gathered[q]).sum::<f64>();
                    z.max(0.0)
                })
                .collect();
            let mask: Vec<f64> = (0..k)
                .map(|i| {
                    let z: f64 = s.f1_b.value.data()[i] + (0..hid).map(|j| s.f1_w.value.data()[i * hid + j] * hidden[j]).sum::<f64>();
                    1.0 / (1.0 + (-z).exp())
                })
                .collect();
            for o in 0..c_out {
                let mut acc = s.bias.as_ref().map_or(0.0, |b| b.value.data()[o]);
                for c in 0..c_in {
                    for (i, &(py, px)) in pos.iter().enumerate() {
                        let wv = s.weight.value.data()[(o * c_in + c) * k + i];
                        acc += mask[i] * wv * bilinear(&x.data()[c * h * w..(c + 1) * h * w], h, w, py, px);
                    }
                }
                y.data_mut()[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

#[test]
fn degenerate_mode_equals_plain_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let geom = rand_geom(&mut rng);
        let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(9..=12), rng.gen_range(9..=12));
        let mut s = SConvState::new("", c_in, c_out, geom, 4, rng.gen_bool(0.5), &mut rng);
        randomise(&mut s, &mut rng);
        s.mode = SConvMode::Degenerate;
        let x = rand_t(&mut rng, &[n, c_in, h, w], 1.0);
        let sp = projected(&mut rng, n, h, w);
        let y = s.forward(&x, &sp, true).unwrap();
        let bias = s.bias.as_ref().map(|b| &b.value);
        let (yc, cache) = conv2d_forward_batch(&x, &s.weight.value, bias, &geom).unwrap();
        assert!(y.max_abs_diff(&yc) <= 1e-12);

        let r = rand_t(&mut rng, y.shape(), 1.0);
        let g = s.backward(&r).unwrap();
        let gc = conv2d_backward_batch(&cache, &s.weight.value, &r).unwrap();
        assert!(g.input.max_abs_diff(&gc.input) <= 1e-12);
        assert!(g.weight.max_abs_diff(&gc.weight) <= 1e-12);
    }
}

#[test]
fn fresh_operator_is_half_the_plain_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..30 {
        let geom = rand_geom(&mut rng);
        let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(9..=12), rng.gen_range(9..=12));
        let mut s = SConvState::new("", c_in, c_out, geom, 8, false, &mut rng);
        let x = rand_t(&mut rng, &[c_in, h, w], 1.0);
        let sp = projected(&mut rng, 1, h, w);
        let y = sconv_forward(&x, &mut s, &sp).unwrap();
        let (yc, _) = conv2d_forward(&x, &s.weight.value, None, &geom).unwrap();
        assert!(y.max_abs_diff(&yc.scale(0.5)) <= 1e-12);
        let mask = s.cached_mask().unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.5));
    }
}

#[test]
fn learned_mode_matches_per_pixel_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let geom = rand_geom(&mut rng);
        let (c_in, c_out) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(9..=11), rng.gen_range(9..=11));
        let mut s = SConvState::new("", c_in, c_out, geom, rng.gen_range(2..=6), rng.gen_bool(0.5), &mut rng);
        randomise(&mut s, &mut rng);
        let x = rand_t(&mut rng, &[c_in, h, w], 1.0);
        let sp = projected(&mut rng, 1, h, w);
        let y = sconv_forward(&x, &mut s, &sp).unwrap();
        let oracle = naive_sconv(&x, &sp.sample(0), &s);
        assert!(y.max_abs_diff(&oracle) <= 1e-12, "diff {}", y.max_abs_diff(&oracle));
    }
}

#[test]
fn batched_forward_equals_per_sample_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let geom = ConvGeometry::square(3, 2, 1);
    let mut s = SConvState::new("", 3, 2, geom, 5, true, &mut rng);
    randomise(&mut s, &mut rng);
    let x = rand_t(&mut rng, &[3, 3, 7, 6], 1.0);
    let sp = projected(&mut rng, 3, 7, 6);
    let y = s.forward(&x, &sp, false).unwrap();
    for n in 0..3 {
        let spn = ProjectedSpatial::new(sp.sample(n), SpatialSource::Depth).unwrap();
        let yn = s.forward(&x.index0(n).unsqueeze0(), &spn, false).unwrap();
        assert!(y.index0(n).max_abs_diff(&yn.index0(0)) <= 1e-12);
    }
}

#[test]
fn gathered_vectors_match_direct_bilinear_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..10 {
        let geom = rand_geom(&mut rng);
        let k = geom.taps();
        let (h, w) = (rng.gen_range(9..=11), rng.gen_range(9..=11));
        let (oh, ow) = geom.output_extent(h, w).unwrap();
        let sp = projected(&mut rng, 1, h, w);
        let off = OffsetField::from_raw(rand_t(&mut rng, &[2 * k, oh, ow], 1.5)).unwrap();
        let g = gather_spatial(&sp, &geom, &off).unwrap();
        assert_eq!(g.len_per_position(), PROJECTED_CHANNELS * k);
        let spd = sp.sample(0);
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g.vector_at(0, oy, ox);
                for i in 0..k {
                    let (by, bx) = geom.tap_origin(oy, ox, i);
                    let (dy, dx) = off.get(0, i, oy, ox);
                    for c in 0..PROJECTED_CHANNELS {
                        let e = bilinear(&spd.data()[c * h * w..(c + 1) * h * w], h, w, by as f64 + dy, bx as f64 + dx);
                        assert!((v[i * PROJECTED_CHANNELS + c] - e).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn centre_tap_of_zero_offsets_reads_the_pixel_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let geom = ConvGeometry::square(3, 1, 1);
    let sp = projected(&mut rng, 1, 6, 5);
    let g = gather_spatial(&sp, &geom, &OffsetField::zeros(1, 9, 6, 5)).unwrap();
    let f = sp.sample(0);
    for y in 0..6 {
        for x in 0..5 {
            let v = g.vector_at(0, y, x);
            for c in 0..PROJECTED_CHANNELS {
                assert_eq!(v[4 * PROJECTED_CHANNELS + c], f.data()[(c * 6 + y) * 5 + x]);
            }
        }
    }
}

#[test]
fn constant_spatial_gathers_the_same_vector_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let consts: Vec<f64> = (0..PROJECTED_CHANNELS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sp = ProjectedSpatial::new(
        Tensor::from_fn(&[PROJECTED_CHANNELS, 8, 8], |i| consts[i / 64]),
        SpatialSource::Hha,
    )
    .unwrap();
    let geom = ConvGeometry::square(3, 1, 1);
    // Offsets keep every tap inside the map; zero padding would otherwise leak in at the border.
    let off = OffsetField::from_raw(Tensor::from_fn(&[18, 8, 8], |_| rng.gen_range(-0.45..0.45))).unwrap();
    let g = gather_spatial(&sp, &geom, &off).unwrap();
    for y in 2..6 {
        for x in 2..6 {
            let v = g.vector_at(0, y, x);
            for i in 0..9 {
                for c in 0..PROJECTED_CHANNELS {
                    assert!((v[i * PROJECTED_CHANNELS + c] - consts[c]).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn mask_lies_strictly_inside_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let geom = ConvGeometry::square(3, 1, 1);
    let sp = projected(&mut rng, 2, 6, 6);
    let off = OffsetField::from_raw(rand_t(&mut rng, &[2, 18, 6, 6], 2.0)).unwrap();
    let g = gather_spatial(&sp, &geom, &off).unwrap();
    let f0w = rand_t(&mut rng, &[7, 576], 0.5);
    let f1w = rand_t(&mut rng, &[9, 7], 3.0);
    let m = generate_weight_mask(&g, &f0w, &Tensor::zeros(&[7]), &f1w, &Tensor::zeros(&[9])).unwrap();
    assert_eq!(m.mask.shape(), [2, 9, 6, 6]);
    assert!(m.mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let half = generate_weight_mask(&g, &f0w, &Tensor::zeros(&[7]), &Tensor::zeros(&[9, 7]), &Tensor::zeros(&[9])).unwrap();
    assert!(half.mask.data().iter().all(|&v| v == 0.5));
}

#[test]
fn offset_generator_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let sp = projected(&mut rng, 1, 8, 8);
    let geom = ConvGeometry::square(3, 2, 1);
    let w = Tensor::zeros(&[18, 64, 3, 3]);
    let off = generate_offsets(&sp, &w, &Tensor::zeros(&[18]), &geom).unwrap();
    assert_eq!(off.raw().shape(), [1, 18, 4, 4]);
    assert_eq!(off.reshaped().shape(), [1, 9, 4, 4, 2]);
    assert!(off.raw().data().iter().all(|&v| v == 0.0));
    let wrong = Tensor::zeros(&[16, 64, 3, 3]);
    assert!(generate_offsets(&sp, &wrong, &Tensor::zeros(&[16]), &geom).is_err());
}

#[test]
fn reshaped_offsets_pair_dy_dx_per_tap() {
    let raw = Tensor::from_fn(&[1, 4, 2, 3], |i| i as f64);
    let off = OffsetField::from_raw(raw).unwrap();
    let r = off.reshaped();
    // tap 1, pixel (1, 2): dy from channel 2, dx from channel 3.
    let idx = (((1 * 2 + 1) * 3) + 2) * 2;
    assert_eq!(r.data()[idx], (2 * 6 + 5) as f64);
    assert_eq!(r.data()[idx + 1], (3 * 6 + 5) as f64);
    assert_eq!(off.get(0, 1, 1, 2), (17.0, 23.0));
}

#[test]
fn projector_shapes_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for source in [SpatialSource::Depth, SpatialSource::Hha, SpatialSource::Coords] {
        let mut p = SpatialProjector::<f64>::new("phi", source, &mut rng);
        let s = rand_t(&mut rng, &[source.channels(), 7, 9], 1.0);
        let out = spatial_project(&s, &mut p).unwrap();
        assert_eq!(out.features().shape(), [1, 64, 7, 9]);
        let zero = spatial_project(&Tensor::zeros(&[source.channels(), 7, 9]), &mut p).unwrap();
        assert!(zero.features().data().iter().all(|&v| v == 0.0));
        assert_eq!(p.param_count(), SpatialProjector::<f64>::expected_param_count(source));
    }
    let mut p = SpatialProjector::<f64>::new("phi", SpatialSource::Depth, &mut rng);
    let mut bad = Tensor::zeros(&[1, 4, 4]);
    bad.data_mut()[3] = f64::NAN;
    assert!(matches!(spatial_project(&bad, &mut p), Err(sconv_core::Error::Numeric(_))));
}

#[test]
fn resize_spatial_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sp = projected(&mut rng, 1, 8, 8);
    assert_eq!(resize_spatial(&sp, 8, 8).unwrap(), sp);
    let half = resize_spatial(&sp, 4, 4).unwrap();
    // Halving with align-corners false averages each 2x2 block.
    let f = sp.sample(0);
    let hf = half.sample(0);
    for c in 0..64 {
        for y in 0..4 {
            for x in 0..4 {
                let at = |yy: usize, xx: usize| f.data()[(c * 8 + yy) * 8 + xx];
                let e = 0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                assert!((hf.data()[(c * 4 + y) * 4 + x] - e).abs() <= 1e-12);
            }
        }
    }
    let one = projected(&mut rng, 1, 1, 1);
    let big = resize_spatial(&one, 4, 4).unwrap().sample(0);
    for c in 0..64 {
        let v = one.features().data()[c];
        assert!(big.data()[c * 16..(c + 1) * 16].iter().all(|&u| u == v));
    }
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut s = SConvState::new("", 2, 3, ConvGeometry::square(3, 1, 1), 4, true, &mut rng);
    randomise(&mut s, &mut rng);
    let x = rand_t(&mut rng, &[2, 5, 5], 1.0);
    let sp = projected(&mut rng, 1, 5, 5);
    sconv_forward(&x, &mut s, &sp).unwrap();
    let g = sconv_backward(&mut s, &Tensor::zeros(&[3, 5, 5])).unwrap();
    for (name, t) in &g.grads {
        assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
    }
    assert_eq!(g.grads["x"].shape(), [2, 5, 5]);
    assert_eq!(g.grads["spatial"].shape(), [64, 5, 5]);
    assert!(sconv_backward(&mut s, &Tensor::zeros(&[3, 5, 5])).is_err());
}

/// Shifting the input and the spatial map by whole strides shifts the output by whole pixels.
#[test]
fn translation_equivariance_away_from_the_border() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (mode, stride) in [(SConvMode::Degenerate, 1), (SConvMode::Degenerate, 2), (SConvMode::Learned, 1), (SConvMode::Learned, 2)] {
        let geom = ConvGeometry::square(3, stride, 1);
        let mut s = SConvState::new("", 2, 2, geom, 4, true, &mut rng);
        randomise(&mut s, &mut rng);
        // Small offsets keep the taps of interior pixels away from the padded margin.
        s.eta_w.value = rand_t(&mut rng, s.eta_w.value.shape(), 0.002);
        s.eta_b.value = rand_t(&mut rng, &[18], 0.3);
        s.mode = mode;
        let (h, w) = (12, 12);
        let shift = stride;
        let x = rand_t(&mut rng, &[1, 2, h, w], 1.0);
        let spt = Tensor::from_fn(&[1, 64, h, w], |_| rng.gen_range(0.0..1.0));
        let shifted = |t: &Tensor<f64>| {
            let c = t.dim(1);
            Tensor::from_fn(t.shape(), |i| {
                let xx = i % w;
                let yy = (i / w) % h;
                let ch = (i / (h * w)) % c;
                if yy >= shift && xx >= shift {
                    t.data()[(ch * h + yy - shift) * w + xx - shift]
                } else {
                    0.0
                }
            })
        };
        let y0 = s.forward(&x, &ProjectedSpatial::new(spt.clone(), SpatialSource::Depth).unwrap(), false).unwrap();
        let y1 = s
            .forward(&shifted(&x), &ProjectedSpatial::new(shifted(&spt), SpatialSource::Depth).unwrap(), false)
            .unwrap();
        let (oh, ow) = (y0.dim(2), y0.dim(3));
        let margin = 3;
        for c in 0..2 {
            for oy in margin..oh - margin {
                for ox in margin..ow - margin {
                    let a = y1.data()[(c * oh + oy + 1) * ow + ox + 1];
                    let b = y0.data()[(c * oh + oy) * ow + ox];
                    assert!((a - b).abs() <= 1e-12, "{mode:?} stride {stride}");
                }
            }
        }
    }
}

#[test]
fn closed_form_counts_match_registry() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let geom = rand_geom(&mut rng);
        let (c_in, c_out, hid) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=32));
        let bias = rng.gen_bool(0.5);
        let s = SConvState::<f64>::new("", c_in, c_out, geom, hid, bias, &mut rng);
        let host = SConvState::<f64>::host_param_count(c_in, c_out, &geom, bias);
        let eta = SConvState::<f64>::eta_param_count(&geom);
        let f = SConvState::<f64>::f_param_count(&geom, hid);
        assert_eq!(s.param_count(), host + eta + f);
        assert_eq!(s.extra_param_count(), eta + f);
    }
}

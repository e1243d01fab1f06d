use bvap::attention::{build_reduction_attention, reduction_attention, reduction_attention_parts};
use bvap::backbone::{build_backbone, conv_name, forward_backbone, import_pretrained, BackboneConfig};
use bvap::checkpoint::save_checkpoint;
use bvap::contrast::{build_contrast, contrast_parts, gaussian_pyramid, intensity_map, ContrastConfig};
use bvap::fusion::{build_dense, build_tandem, dense_combine, resize_conv, tandem, weight_name, FusionLayout, LEVELS};
use bvap::layers::{Net, ParamBuilder};
use bvap::params::InitScheme;
use bvap::{Error, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn uniform01(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(0.0..1.0))
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { base_size: 64, width_factor: 0.125, init: InitScheme::FanIn, ..Default::default() }
}

// ---- backbone ----------------------------------------------------------

#[test]
fn backbone_widths_follow_width_factor() {
    assert_eq!(BackboneConfig::default().widths(), [64, 128, 256, 512, 512]);
    assert_eq!(tiny_backbone().widths(), [8, 16, 32, 64, 64]);
}

#[test]
fn backbone_has_thirteen_convolutions() {
    let store = build_backbone(&tiny_backbone(), 0).unwrap();
    assert_eq!(store.len(), 26);
    let per_block = [2, 2, 3, 3, 3];
    for (b, &n) in per_block.iter().enumerate() {
        for l in 1..=n {
            assert!(store.contains(&format!("{}.weight", conv_name(b + 1, l))));
        }
        assert!(!store.contains(&format!("{}.weight", conv_name(b + 1, n + 1))));
    }
    let default = BackboneConfig { base_size: 64, width_factor: 0.125, ..Default::default() };
    let store = build_backbone(&default, 0).unwrap();
    for (name, t) in store.iter() {
        if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        } else {
            assert!(t.data().iter().all(|&v| v.abs() <= 0.02));
        }
    }
}

#[test]
fn backbone_build_is_deterministic() {
    let a = build_backbone(&tiny_backbone(), 9).unwrap();
    let b = build_backbone(&tiny_backbone(), 9).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_backbone(&tiny_backbone(), 10).unwrap());
}

#[test]
fn backbone_sizes_at_64() {
    let cfg = tiny_backbone();
    let store = build_backbone(&cfg, 1).unwrap();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(uniform01([1, 3, 64, 64], 2));
    let out = forward_backbone(&net, &cfg, x).unwrap();
    let sides: Vec<usize> = out.as_array().iter().map(|&v| g.dims(v)[2]).collect();
    assert_eq!(sides, [64, 32, 16, 8, 8]);
    let chans: Vec<usize> = out.as_array().iter().map(|&v| g.dims(v)[1]).collect();
    assert_eq!(chans, [8, 16, 32, 64, 64]);
}

#[test]
fn backbone_rejects_wrong_input_size() {
    let cfg = tiny_backbone();
    let store = build_backbone(&cfg, 1).unwrap();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(uniform01([1, 3, 32, 32], 2));
    assert!(matches!(forward_backbone(&net, &cfg, x), Err(Error::Shape { .. })));
}

#[test]
fn backbone_forward_is_deterministic() {
    let cfg = tiny_backbone();
    let store = build_backbone(&cfg, 4).unwrap();
    let image = uniform01([1, 3, 64, 64], 5);
    let run = || {
        let g = Graph::new();
        let bound = store.bind(&g);
        let net = Net::new(&g, &bound);
        let out = forward_backbone(&net, &cfg, g.constant(image.clone())).unwrap();
        let f5 = g.value(out.f5).clone();
        f5
    };
    assert_eq!(run(), run());
}

fn backbone_f5_sum(store: &ParamStore, cfg: &BackboneConfig, image: &Tensor) -> f64 {
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let out = forward_backbone(&net, cfg, g.constant(image.clone())).unwrap();
    let s = g.value(out.f5).sum();
    s
}

#[test]
fn backbone_image_gradient_matches_differences() {
    let cfg = tiny_backbone();
    let store = build_backbone(&cfg, 6).unwrap();
    let image = uniform01([1, 3, 64, 64], 7);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.param(image.clone());
    let out = forward_backbone(&net, &cfg, x).unwrap();
    g.backward(g.sum(out.f5)).unwrap();
    let analytic = g.grad(x).unwrap();

    // A full sweep needs 2·12288 forwards; a seeded sample of pixels covers
    // every channel, the borders and the centre.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut idx: Vec<usize> = vec![0, 63, 64 * 32 + 32, 2 * 4096 + 4095];
    idx.extend((0..12).map(|_| rng.random_range(0..image.len())));
    let h = 1e-5;
    for i in idx {
        let mut plus = image.clone();
        plus.data_mut()[i] += h;
        let mut minus = image.clone();
        minus.data_mut()[i] -= h;
        let numeric = (backbone_f5_sum(&store, &cfg, &plus) - backbone_f5_sum(&store, &cfg, &minus)) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        assert!(err <= 1e-4, "pixel {i}: analytic {} numeric {numeric}", analytic[i]);
    }
}

#[test]
fn pretrained_import_rules() {
    let tiny = tiny_backbone();
    let mut tiny_store = build_backbone(&tiny, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.ckpt");
    save_checkpoint(&ParamStore::new(), &empty).unwrap();
    assert!(matches!(import_pretrained(&mut tiny_store, &tiny, &empty), Err(Error::Invalid(_))));

    let full = BackboneConfig { base_size: 64, ..Default::default() };
    let source = build_backbone(&full, 1).unwrap();
    let mut target = build_backbone(&full, 2).unwrap();
    let mut first_four = ParamStore::new();
    for (name, t) in source.iter() {
        if !name.starts_with("backbone.conv5") {
            first_four.insert(name, t.clone()).unwrap();
        }
    }
    let file = dir.path().join("vgg.ckpt");
    save_checkpoint(&first_four, &file).unwrap();
    let block5_before: Vec<Tensor> =
        target.iter().filter(|(n, _)| n.starts_with("backbone.conv5")).map(|(_, t)| t.clone()).collect();
    import_pretrained(&mut target, &full, &file).unwrap();
    for (name, t) in first_four.iter() {
        assert_eq!(target.get(name).unwrap().data(), t.data(), "{name}");
    }
    let block5_after: Vec<Tensor> =
        target.iter().filter(|(n, _)| n.starts_with("backbone.conv5")).map(|(_, t)| t.clone()).collect();
    assert_eq!(block5_before, block5_after);

    let mut bad = ParamStore::new();
    bad.insert("backbone.conv1_1.weight", Tensor::zeros([64, 3, 1, 1])).unwrap();
    bad.insert("head.extra", Tensor::zeros([1, 1, 1, 1])).unwrap();
    let bad_file = dir.path().join("bad.ckpt");
    save_checkpoint(&bad, &bad_file).unwrap();
    let err = import_pretrained(&mut target, &full, &bad_file).unwrap_err().to_string();
    assert!(err.contains("backbone.conv1_1.weight"), "{err}");
    assert!(err.contains("head.extra"), "{err}");
    assert!(err.contains("backbone.conv2_1.weight (missing)"), "{err}");
}

// ---- contrast ----------------------------------------------------------

fn contrast_store(in_channels: usize, cfg: &ContrastConfig, seed: u64) -> ParamStore {
    let mut pb = ParamBuilder::new(seed, InitScheme::FanIn);
    build_contrast(&mut pb, "c", in_channels, cfg).unwrap();
    pb.finish()
}

#[test]
fn intensity_map_is_channel_mean() {
    let g = Graph::new();
    let one = g.constant(random([2, 1, 3, 3], 1));
    assert_eq!(*g.value(intensity_map(&g, one)), *g.value(one));

    let x = Tensor::from_fn([1, 3, 2, 2], |_, c, _, _| 2.0 * c as f64);
    let m = intensity_map(&g, g.constant(x));
    assert!(g.value(m).data().iter().all(|&v| v == 2.0));

    let x = random([2, 5, 4, 3], 2);
    let m = g.value(intensity_map(&g, g.constant(x.clone()))).clone();
    for b in 0..2 {
        for y in 0..4 {
            for xx in 0..3 {
                let mean = (0..5).map(|c| x.at(b, c, y, xx)).sum::<f64>() / 5.0;
                assert!((m.at(b, 0, y, xx) - mean).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn pyramid_properties() {
    let cfg = ContrastConfig::for_base(224, 4);
    assert_eq!(cfg.sigmas, vec![5.0, 10.0, 20.0, 40.0, 80.0]);
    let small = ContrastConfig::for_base(64, 4);
    let g = Graph::new();
    let c = g.constant(Tensor::full([1, 1, 20, 20], 0.3));
    let p = gaussian_pyramid(&g, c, &small).unwrap();
    assert_eq!(g.dims(p), [1, 5, 20, 20]);
    assert!(g.value(p).data().iter().all(|&v| (v - 0.3).abs() < 1e-12));

    let x = g.constant(random([1, 1, 32, 32], 3));
    let p = g.value(gaussian_pyramid(&g, x, &small).unwrap()).clone();
    let variance = |l: usize| {
        let plane = p.plane(0, l);
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64
    };
    for l in 1..5 {
        assert!(variance(l) <= variance(l - 1) + 1e-15, "level {l}");
    }
}

#[test]
fn residual_channels_are_five_per_input() {
    let cfg = ContrastConfig::for_base(64, 8);
    let store = contrast_store(8, &cfg, 0);
    assert_eq!(store.get("c.merge_residual.weight").unwrap().dims(), [8, 40, 1, 1]);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let parts = contrast_parts(&net, "c", g.constant(random([1, 8, 16, 16], 4)), &cfg).unwrap();
    assert_eq!(g.dims(parts.residuals), [1, 40, 16, 16]);
    assert!(g.value(parts.residuals).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn constant_input_leaves_only_the_pyramid_branch() {
    let cfg = ContrastConfig::for_base(64, 3);
    let store = contrast_store(3, &cfg, 1);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = Tensor::from_fn([1, 3, 12, 12], |_, c, _, _| 0.25 * (c + 1) as f64);
    let parts = contrast_parts(&net, "c", g.constant(x), &cfg).unwrap();
    // Channels differ, so residuals are per-channel constants, not zero.
    let flat = Tensor::full([1, 3, 12, 12], 0.4);
    let parts_flat = contrast_parts(&net, "c", g.constant(flat), &cfg).unwrap();
    assert!(g.value(parts_flat.residuals).data().iter().all(|&v| v == 0.0));
    assert!(g.value(parts_flat.residual_term).data().iter().all(|&v| v == 0.0));
    assert_eq!(*g.value(parts_flat.output), *g.value(parts_flat.pyramid_term));
    assert!(g.value(parts.residuals).data().iter().any(|&v| v > 0.0));
}

#[test]
fn forced_weights_reproduce_the_pyramid() {
    let cfg = ContrastConfig::for_base(64, 5);
    let mut store = contrast_store(2, &cfg, 2);
    store.assign("c.merge_residual.weight", &Tensor::zeros([5, 10, 1, 1])).unwrap();
    let eye = Tensor::from_fn([5, 5, 1, 1], |o, i, _, _| f64::from(u8::from(o == i)));
    store.assign("c.merge_pyramid.weight", &eye).unwrap();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let parts = contrast_parts(&net, "c", g.constant(random([1, 2, 16, 16], 5)), &cfg).unwrap();
    assert!(g.value(parts.output).max_abs_diff(&g.value(parts.pyramid)) < 1e-12);
}

#[test]
fn uniform_shift_changes_only_the_pyramid() {
    let cfg = ContrastConfig::for_base(64, 2);
    let store = contrast_store(3, &cfg, 3);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = random([1, 3, 10, 10], 6);
    let shifted = Tensor::new(x.dims(), x.data().iter().map(|v| v + 0.75).collect()).unwrap();
    let a = contrast_parts(&net, "c", g.constant(x), &cfg).unwrap();
    let b = contrast_parts(&net, "c", g.constant(shifted), &cfg).unwrap();
    assert!(g.value(a.residuals).max_abs_diff(&g.value(b.residuals)) < 1e-12);
    assert!(g.value(a.pyramid_term).max_abs_diff(&g.value(b.pyramid_term)) > 1e-3);
}

// ---- reduction-attention -----------------------------------------------

fn ra_store(cin: usize, cout: usize, seed: u64) -> ParamStore {
    let mut pb = ParamBuilder::new(seed, InitScheme::FanIn);
    build_reduction_attention(&mut pb, "ra", cin, cout, true).unwrap();
    let mut store = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let bias = Tensor::from_fn([1, cout, 1, 1], |_, _, _, _| rng.random_range(-0.5..0.5));
    store.assign("ra.fc.bias", &bias).unwrap();
    store
}

#[test]
fn attention_weights_lie_in_open_unit_interval() {
    let store = ra_store(6, 4, 0);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(random([2, 6, 5, 5], 1));
    let parts = reduction_attention_parts(&net, "ra", x).unwrap();
    assert_eq!(g.dims(parts.output), [2, 4, 5, 5]);
    let a = g.value(parts.weights.unwrap()).clone();
    assert_eq!(a.dims(), [2, 4, 1, 1]);
    assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn output_is_channel_weight_times_reduced_feature() {
    let store = ra_store(5, 3, 2);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let parts = reduction_attention_parts(&net, "ra", g.constant(random([2, 5, 4, 6], 3))).unwrap();
    let (f, a, out) = (g.value(parts.reduced), g.value(parts.weights.unwrap()), g.value(parts.output));
    for b in 0..2 {
        for c in 0..3 {
            let ac = a.at(b, c, 0, 0);
            for (o, r) in out.plane(b, c).iter().zip(f.plane(b, c)) {
                assert_eq!(*o, ac * r);
            }
        }
    }
}

#[test]
fn saturated_weights_pass_the_reduced_feature() {
    let mut store = ra_store(4, 4, 4);
    store.assign("ra.fc.weight", &Tensor::zeros([4, 4, 1, 1])).unwrap();
    store.assign("ra.fc.bias", &Tensor::full([1, 4, 1, 1], 40.0)).unwrap();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let parts = reduction_attention_parts(&net, "ra", g.constant(random([1, 4, 5, 5], 5))).unwrap();
    assert_eq!(*g.value(parts.output), *g.value(parts.reduced));
}

#[test]
fn raising_a_bias_never_shrinks_its_channel() {
    let store = ra_store(4, 3, 6);
    let x = random([1, 4, 5, 5], 7);
    let channel_norm = |store: &ParamStore| {
        let g = Graph::new();
        let bound = store.bind(&g);
        let net = Net::new(&g, &bound);
        let y = reduction_attention(&net, "ra", g.constant(x.clone())).unwrap();
        let v = g.value(y);
        v.plane(0, 1).iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut prev = channel_norm(&store);
    let mut s = store.clone();
    for step in 1..8 {
        let mut b = s.get("ra.fc.bias").unwrap().clone();
        b.data_mut()[1] += 0.5 * step as f64;
        s.assign("ra.fc.bias", &b).unwrap();
        let now = channel_norm(&s);
        assert!(now >= prev);
        prev = now;
    }
}

#[test]
fn attention_rejects_channel_mismatch() {
    let store = ra_store(4, 2, 8);
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(random([1, 3, 4, 4], 9));
    assert!(matches!(reduction_attention(&net, "ra", x), Err(Error::Shape { .. })));
}

// ---- dense fusion --------------------------------------------------------

#[test]
fn resize_conv_examples() {
    let mut pb = ParamBuilder::new(0, InitScheme::FanIn);
    pb.conv("avg", 1, 1, 3, false).unwrap();
    pb.conv("eye", 1, 1, 3, false).unwrap();
    let mut store = pb.finish();
    store.assign("avg.weight", &Tensor::full([1, 1, 3, 3], 1.0 / 9.0)).unwrap();
    store
        .assign("eye.weight", &Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| f64::from(u8::from(y == 1 && x == 1))))
        .unwrap();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);

    let flat = g.constant(Tensor::full([1, 1, 5, 5], 0.6));
    let y = resize_conv(&net, "avg", flat).unwrap();
    assert_eq!(g.dims(y), [1, 1, 10, 10]);
    let v = g.value(y).clone();
    for r in 1..9 {
        for c in 1..9 {
            assert!((v.at(0, 0, r, c) - 0.6).abs() < 1e-12);
        }
    }

    let x = g.constant(random([1, 1, 4, 3], 1));
    let y = resize_conv(&net, "eye", x).unwrap();
    let up = g.nearest_resize(x, 2).unwrap();
    assert_eq!(*g.value(y), *g.value(up));
}

#[test]
fn tandem_counts() {
    let mut pb = ParamBuilder::new(0, InitScheme::FanIn);
    build_tandem(&mut pb, "t3", 2, 3, true).unwrap();
    build_tandem(&mut pb, "t1", 2, 1, true).unwrap();
    let store = pb.finish();
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let x = g.constant(random([1, 2, 28, 28], 2));
    assert_eq!(tandem(&net, "t0", x, 0).unwrap(), x);
    assert_eq!(g.dims(tandem(&net, "t3", x, 3).unwrap()), [1, 2, 224, 224]);
    let x = g.constant(random([1, 2, 112, 112], 3));
    assert_eq!(g.dims(tandem(&net, "t1", x, 1).unwrap()), [1, 2, 224, 224]);
}

fn tiny_layout() -> FusionLayout {
    FusionLayout { in_channels: [3, 4, 5, 6, 6], sizes: [16, 8, 4, 2, 2], channels: 4, attention: true }
}

fn dense_store(layout: &FusionLayout, seed: u64) -> ParamStore {
    let mut pb = ParamBuilder::new(seed, InitScheme::FanIn);
    build_dense(&mut pb, layout).unwrap();
    let mut store = pb.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for n in names {
        let d = store.get(&n).unwrap().dims();
        store.assign(&n, &Tensor::from_fn(d, |_, _, _, _| rng.random_range(0.05..0.5))).unwrap();
    }
    store
}

fn dense_feats(layout: &FusionLayout, seed: u64) -> Vec<Tensor> {
    (0..LEVELS)
        .map(|k| uniform01([1, layout.in_channels[k], layout.sizes[k], layout.sizes[k]], seed + k as u64))
        .collect()
}

fn dense_outputs(store: &ParamStore, layout: &FusionLayout, feats: &[Tensor]) -> Vec<Tensor> {
    let g = Graph::new();
    let bound = store.bind(&g);
    let net = Net::new(&g, &bound);
    let vars: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
    let out = dense_combine(&net, vars.try_into().unwrap(), layout).unwrap();
    out.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn dense_outputs_share_full_size_and_width() {
    let layout = tiny_layout();
    let store = dense_store(&layout, 0);
    for gj in dense_outputs(&store, &layout, &dense_feats(&layout, 10)) {
        assert_eq!(gj.dims(), [1, 4, 16, 16]);
    }
}

#[test]
fn dense_shape_audit_at_224_exponents() {
    let layout = FusionLayout { in_channels: [1; 5], sizes: [224, 112, 56, 28, 28], channels: 1, attention: false };
    let store = dense_store(&layout, 1);
    for gj in dense_outputs(&store, &layout, &dense_feats(&layout, 20)) {
        assert_eq!(gj.dims(), [1, 1, 224, 224]);
    }
}

#[test]
fn dense_has_ten_connection_scalars() {
    let store = dense_store(&tiny_layout(), 0);
    let scalars: Vec<&str> = store.names().filter(|n| n.starts_with("fuse.w")).collect();
    assert_eq!(scalars.len(), 10);
    for (j, i) in [(1, 1), (1, 4), (2, 2), (2, 4), (3, 3), (3, 4), (4, 4)] {
        assert!(store.contains(&weight_name(j, i)));
    }
    assert!(!store.contains(&weight_name(1, 5)));
}

#[test]
fn zero_connection_weights_disconnect_levels() {
    let layout = tiny_layout();
    let mut store = dense_store(&layout, 2);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("fuse.w")).map(String::from).collect();
    for n in &names {
        store.assign(n, &Tensor::scalar(0.0)).unwrap();
    }
    let a = dense_feats(&layout, 30);
    let mut b = dense_feats(&layout, 40);
    b[LEVELS - 1] = a[LEVELS - 1].clone();
    let out_a = dense_outputs(&store, &layout, &a);
    let out_b = dense_outputs(&store, &layout, &b);
    assert_eq!(out_a, out_b);

    store.assign(&weight_name(2, 3), &Tensor::scalar(1.0)).unwrap();
    let out_a = dense_outputs(&store, &layout, &a);
    let out_b = dense_outputs(&store, &layout, &b);
    assert_eq!(out_a[0], out_b[0]);
    assert_ne!(out_a[1], out_b[1]);
    assert_eq!(out_a[2], out_b[2]);
}

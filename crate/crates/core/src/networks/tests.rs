use super::*;
use crate::tensor::Shape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nets(side: SideInfo) -> MmNets<f32> {
    nets_with(side, 0.02)
}

// Untrained nets in eval mode shrink activations at small init, which would
// hide differences between side-information inputs.
fn nets_with(side: SideInfo, init_sigma: f64) -> MmNets<f32> {
    let arch = ArchConfig {
        side_info: side,
        init_sigma,
        ..ArchConfig::default()
    };
    let specs = [ModalitySpec::rgb(), ModalitySpec::depth(), ModalitySpec::seg(8)];
    MmNets::build(&specs, &arch, Some(Modality::Rgb), 7).unwrap()
}

fn image(c: usize, n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(Shape::new(n, c, 32, 32), 0.0, 1.0, &mut rng)
}

fn param_shape(store: &ParamStore<f32>, name: &str) -> Shape {
    store
        .params()
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
        .shape()
}

#[test]
fn depth_adapters_map_one_channel() {
    let n = nets(SideInfo::PoolIndices);
    assert_eq!(param_shape(&n.store, "enc.depth.conv1.weight"), Shape::new(16, 1, 3, 3));
    // 3 stages of 2 convs, minus the one replaced by the head, plus the head.
    assert_eq!(param_shape(&n.store, "dec.depth.conv6.weight"), Shape::new(1, 16, 3, 3));
}

#[test]
fn segmentation_adapters_use_class_count() {
    let arch = ArchConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    build_modality_nets(&mut store, &ModalitySpec::seg(14), &arch, &mut rng).unwrap();
    assert_eq!(param_shape(&store, "enc.seg.conv1.weight"), Shape::new(16, 14, 3, 3));
    assert_eq!(param_shape(&store, "dec.seg.conv6.weight"), Shape::new(14, 16, 3, 3));
}

#[test]
fn desk_latent_shape_and_index_stack() {
    let n = nets(SideInfo::PoolIndices);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let code = encode(&n.store, n.encoder(Modality::Rgb).unwrap(), &image(3, 2, 0), 0.0, &mut rng).unwrap();
    assert_eq!(code.features.shape(), Shape::new(2, 64, 4, 4));
    assert_eq!(code.index_stack.len(), 3);
    assert_eq!(code.index_stack[2].shape(), Shape::new(2, 64, 4, 4));
    assert_eq!(code.index_stack[0].input_hw(), (32, 32));
    assert_eq!(n.arch().latent_shape(2), code.features.shape());
}

#[test]
fn noise_changes_features_but_not_indices() {
    let n = nets(SideInfo::PoolIndices);
    let enc = n.encoder(Modality::Depth).unwrap();
    let x = image(1, 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a0 = encode(&n.store, enc, &x, 0.0, &mut rng).unwrap();
    let b0 = encode(&n.store, enc, &x, 0.0, &mut rng).unwrap();
    assert_eq!(a0.features, b0.features);
    let a = encode(&n.store, enc, &x, 0.5, &mut rng).unwrap();
    let b = encode(&n.store, enc, &x, 0.5, &mut rng).unwrap();
    assert_ne!(a.features, b.features);
    assert_eq!(a.index_stack, b.index_stack);
    assert_eq!(a.index_stack, a0.index_stack);
}

#[test]
fn identical_batch_rows_encode_identically() {
    let n = nets(SideInfo::PoolIndices);
    let one = image(3, 1, 4);
    let two = Tensor::stack(&[&one, &one]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let code = encode(&n.store, n.encoder(Modality::Rgb).unwrap(), &two, 0.0, &mut rng).unwrap();
    assert_eq!(code.features.sample(0), code.features.sample(1));
}

#[test]
fn decoders_restore_resolution_and_channels() {
    for side in [SideInfo::PoolIndices, SideInfo::None, SideInfo::Skip] {
        let n = nets(side);
        for from in n.modalities() {
            let c_in = n.spec(from).unwrap().channels;
            for to in n.modalities() {
                let y = n.translate(from, to, &image(c_in, 2, 5)).unwrap();
                let c_out = n.spec(to).unwrap().channels;
                assert_eq!(y.shape(), Shape::new(2, c_out, 32, 32), "{side} {from}->{to}");
                assert!(y.all_finite());
            }
        }
    }
}

#[test]
fn decoder_kinds_follow_side_info() {
    assert_eq!(nets(SideInfo::PoolIndices).decoder(Modality::Seg).unwrap().kind(), DecoderKind::Unpool);
    assert_eq!(nets(SideInfo::None).decoder(Modality::Seg).unwrap().kind(), DecoderKind::Upsample);
    assert_eq!(nets(SideInfo::Skip).decoder(Modality::Depth).unwrap().kind(), DecoderKind::Skip);
    for side in [SideInfo::PoolIndices, SideInfo::None, SideInfo::Skip] {
        assert_eq!(nets(side).decoder(Modality::Rgb).unwrap().kind(), DecoderKind::Compact);
    }
}

#[test]
fn segmentation_output_is_a_distribution() {
    let n = nets(SideInfo::PoolIndices);
    let y = n.translate(Modality::Depth, Modality::Seg, &image(1, 2, 6)).unwrap();
    let plane = 32 * 32;
    for b in 0..2 {
        for p in 0..plane {
            let total: f32 = (0..8).map(|k| y.sample(b)[k * plane + p]).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn rgb_decoder_ignores_side_information() {
    let n = nets_with(SideInfo::PoolIndices, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = encode(&n.store, n.encoder(Modality::Depth).unwrap(), &image(1, 1, 7), 0.0, &mut rng).unwrap();
    let other = encode(&n.store, n.encoder(Modality::Depth).unwrap(), &image(1, 1, 8), 0.0, &mut rng).unwrap();
    assert_ne!(a.index_stack, other.index_stack);
    let mut b = a.clone();
    b.index_stack = other.index_stack.clone();
    b.skip_features = other.skip_features.clone();
    let dec = n.decoder(Modality::Rgb).unwrap();
    assert_eq!(decode(&n.store, dec, &a).unwrap(), decode(&n.store, dec, &b).unwrap());
    // An index-using decoder does see the difference.
    let seg = n.decoder(Modality::Seg).unwrap();
    assert_ne!(decode(&n.store, seg, &a).unwrap(), decode(&n.store, seg, &b).unwrap());
}

#[test]
fn unpool_decoder_rejects_a_short_index_stack() {
    let n = nets(SideInfo::PoolIndices);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut code = encode(&n.store, n.encoder(Modality::Rgb).unwrap(), &image(3, 1, 9), 0.0, &mut rng).unwrap();
    code.index_stack.pop();
    assert!(matches!(
        decode(&n.store, n.decoder(Modality::Seg).unwrap(), &code),
        Err(NetError::Incompatible(_))
    ));
}

#[test]
fn encoder_rejects_wrong_channel_count() {
    let n = nets(SideInfo::PoolIndices);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = encode(&n.store, n.encoder(Modality::Depth).unwrap(), &image(3, 1, 0), 0.0, &mut rng).unwrap_err();
    assert!(matches!(err, NetError::ChannelMismatch { expected: 1, got: 3, .. }));
}

#[test]
fn architecture_validation() {
    let bad = ArchConfig {
        input_hw: (36, 32),
        ..ArchConfig::default()
    };
    assert!(matches!(bad.validate(), Err(NetError::Arch(_))));
    let one_stage = ArchConfig {
        stage_widths: vec![8],
        convs_per_stage: vec![1],
        ..ArchConfig::default()
    };
    assert!(one_stage.validate().is_err());
    let mut rgb = ModalitySpec::rgb();
    rgb.decoder_uses_pool_indices = true;
    assert!(rgb.validate().is_err());
}

#[test]
fn shared_encoder_is_one_parameter_set() {
    let mut n = nets(SideInfo::PoolIndices);
    let x = image(1, 1, 11);
    let to_rgb = n.encoder(Modality::Depth).unwrap() as *const EncoderNet;
    let to_seg = n.encoder(Modality::Depth).unwrap() as *const EncoderNet;
    assert!(std::ptr::eq(to_rgb, to_seg));
    let r0 = n.translate(Modality::Depth, Modality::Rgb, &x).unwrap();
    let s0 = n.translate(Modality::Depth, Modality::Seg, &x).unwrap();
    let id = n.store.group_ids("enc.depth")[0];
    n.store.param_mut(id).data_mut().iter_mut().for_each(|w| *w += 0.5);
    assert_ne!(n.translate(Modality::Depth, Modality::Rgb, &x).unwrap(), r0);
    assert_ne!(n.translate(Modality::Depth, Modality::Seg, &x).unwrap(), s0);
}

#[test]
fn cascade_goes_through_the_intermediate_image() {
    let n = nets(SideInfo::PoolIndices);
    let x = image(1, 2, 12);
    let rgb = n.translate(Modality::Depth, Modality::Rgb, &x).unwrap();
    let direct = n.translate(Modality::Rgb, Modality::Seg, &rgb).unwrap();
    let cascade = n.cascade(&[Modality::Depth, Modality::Rgb, Modality::Seg], &x).unwrap();
    assert_eq!(cascade, direct);
}

fn constant_code(value: f32, source: Modality) -> LatentCode<f32> {
    LatentCode {
        features: Tensor::full(Shape::new(1, 2, 2, 2), value),
        index_stack: Vec::new(),
        skip_features: Vec::new(),
        source_modality: source,
    }
}

#[test]
fn fusion_weights() {
    let a = constant_code(0.0, Modality::Depth);
    let b = constant_code(5.0, Modality::Rgb);
    let f = fuse_latents(&a, &b, 0.2, Modality::Rgb).unwrap();
    assert!(f.features.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    assert_eq!(f.source_modality, Modality::Rgb);
    assert_eq!(fuse_latents(&a, &b, 0.0, Modality::Rgb).unwrap().features, a.features);
    assert_eq!(fuse_latents(&a, &b, 1.0, Modality::Rgb).unwrap().features, b.features);
    let mut small = b.clone();
    small.features = Tensor::zeros(Shape::new(1, 1, 2, 2));
    assert!(fuse_latents(&a, &small, 0.2, Modality::Rgb).is_err());
    assert!(fuse_latents(&a, &b, 1.5, Modality::Rgb).is_err());
    assert!(fuse_latents(&a, &b, 0.2, Modality::Seg).is_err());
}

#[test]
fn fusion_takes_side_information_from_the_named_source() {
    let n = nets(SideInfo::PoolIndices);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rgb = encode(&n.store, n.encoder(Modality::Rgb).unwrap(), &image(3, 1, 13), 0.0, &mut rng).unwrap();
    let depth = encode(&n.store, n.encoder(Modality::Depth).unwrap(), &image(1, 1, 14), 0.0, &mut rng).unwrap();
    let f = fuse_latents(&depth, &rgb, 0.2, Modality::Rgb).unwrap();
    assert_eq!(f.index_stack, rgb.index_stack);
}

#[test]
fn discriminator_shapes() {
    let n = nets(SideInfo::PoolIndices);
    let disc = n.discriminator().unwrap();
    let y = discriminate(&n.store, disc, &image(3, 6, 15)).unwrap();
    assert_eq!(y.shape(), Shape::new(6, 1, 2, 2));
}

#[test]
fn discriminator_with_zero_weights_scores_zero() {
    let mut n = nets(SideInfo::PoolIndices);
    for id in n.store.group_ids("disc.rgb") {
        n.store.param_mut(id).data_mut().iter_mut().for_each(|w| *w = 0.0);
    }
    let y = discriminate(&n.store, n.discriminator().unwrap(), &image(3, 2, 16)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_scale_critic_shapes() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let disc = build_discriminator(&mut store, Modality::Rgb, 3, 64, 0.02, &mut rng);
    let widths: Vec<usize> = disc.convs.iter().map(|c| store.param(c.weight).shape().n()).collect();
    assert_eq!(widths, [64, 128, 256, 512]);
    let mut h = 256;
    for c in &disc.convs {
        h = crate::tensor::kernels::conv_out_dim("t", h, 4, c.stride, c.pad).unwrap();
    }
    assert_eq!(h, 16);
}

#[test]
fn network_counts() {
    assert_eq!(count_required_networks(11, Strategy::Pairwise), (55, 55));
    assert_eq!(count_required_networks(11, Strategy::MixAndMatch), (11, 11));
    assert_eq!(count_required_networks(1, Strategy::Pairwise), (0, 0));
    assert_eq!(count_required_networks(1, Strategy::MixAndMatch), (1, 1));
}

#[test]
fn build_is_seed_deterministic() {
    let a = nets(SideInfo::PoolIndices);
    let b = nets(SideInfo::PoolIndices);
    assert_eq!(a.store.checksum(None), b.store.checksum(None));
    let arch = ArchConfig::default();
    let c = MmNets::<f32>::build(&[ModalitySpec::rgb()], &arch, None, 8).unwrap();
    let d = MmNets::<f32>::build(&[ModalitySpec::rgb()], &arch, None, 9).unwrap();
    assert_ne!(c.store.checksum(None), d.store.checksum(None));
}

#[test]
fn modality_names_parse() {
    for m in Modality::ALL {
        assert_eq!(m.name().parse::<Modality>().unwrap(), m);
    }
    assert_eq!("S".parse::<Modality>().unwrap(), Modality::Seg);
    assert!("nir".parse::<Modality>().is_err());
}

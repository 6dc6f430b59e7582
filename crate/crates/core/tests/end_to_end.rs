use memos_core::eval::{self, PixelPool, ScoreMap};
use memos_core::maxent::{self, MaxEntConfig};
use memos_core::metacog::{self, MetacogTrainParams};
use memos_core::seg::{self, SegmentationModel, TrainParams};
use memos_core::synth::{self, SynthConfig};
use memos_core::toy::{self, ToySceneConfig};
use memos_core::{LabeledImage, MetacogModelConfig, SegModelConfig, SegNet};

fn scenes(n: usize, seed: u64, ood: bool) -> Vec<LabeledImage> {
    let c = ToySceneConfig { num_images: n, height: 32, width: 32, num_classes: 5, seed, ood_mode: ood, atypical_percent: 25 };
    toy::generate_toy_scenes(&c, "t").unwrap()
}

/// Trains every stage at a tiny size and returns MEMOS scores on the test set.
fn run() -> (Vec<f64>, Vec<u8>) {
    let tax = toy::toy_taxonomy(5).unwrap();
    let (train, val, test) = (scenes(8, 1, false), scenes(3, 2, false), scenes(3, 3, true));
    let mut net = SegNet::new(SegModelConfig { num_classes: 5, input_channels: 3, depth: 2, base_width: 8, seed: 4 }).unwrap();
    seg::train_segmentation(&mut net, &train, &val, &tax, TrainParams { epochs: 1, lr: 2e-3, batch_size: 4, seed: 4 }).unwrap();
    let synth = synth::build_synth_dataset(&train, &tax, &SynthConfig { subset_size: 2, sample_count: 4, blur: None, seed: 6 }).unwrap();
    let cfg = MaxEntConfig { lambda: 1.0, epochs: 1, lr: 5e-4, batch_size: 4, seed: 7 };
    let tuned = maxent::finetune(&net, &train, &synth.samples, &cfg, &tax).unwrap();
    let mc = MetacogModelConfig { depth: 2, base_width: 8, seed: 8, class_encoding: Default::default(), entropy_scaling: Default::default() };
    let params = MetacogTrainParams { epochs: 1, lr: 2e-3, batch_size: 4, subset_size: 100, seed: 9 };
    let (meta, _) = metacog::train_metacog(mc, &tuned.model, &train, &params, tax.ignore_id).unwrap();

    let mut pool = PixelPool::default();
    for s in &test {
        let probs = seg::softmax(&tuned.model.forward(&s.image).unwrap()).unwrap();
        let g = meta.input_for(&probs).unwrap();
        assert_eq!((g.channels, g.height, g.width), (2, 32, 32));
        assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let mask = metacog::infer_ood_mask(&meta, &tuned.model, &s.image).unwrap();
        assert!(mask.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        pool.add(&ScoreMap(mask.0), s.ood_map.as_ref().unwrap()).unwrap();
    }
    (pool.scores, pool.labels)
}

#[test]
fn full_pipeline_is_bit_reproducible() {
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!((0.0..=1.0).contains(&eval::auprc(&a, &la).unwrap()));
}

#[test]
fn synthesized_pixels_recount() {
    let tax = toy::toy_taxonomy(5).unwrap();
    let train = scenes(10, 21, false);
    let set = synth::build_synth_dataset(&train, &tax, &SynthConfig { subset_size: 2, sample_count: 10, blur: None, seed: 3 }).unwrap();
    for s in &set.samples {
        let src = train.iter().find(|t| t.id == s.source_id).unwrap();
        assert_eq!(s.label_map, src.label_map);
        for i in 0..s.label_map.len() {
            let label = src.label_map.as_slice()[i];
            let expect = u8::from(label != tax.ignore_id && !set.c_sub.contains(&label));
            assert_eq!(s.synth_ood_mask.as_slice()[i], expect);
            if expect == 0 {
                assert_eq!(s.image.as_raw()[3 * i..3 * i + 3], src.image.as_raw()[3 * i..3 * i + 3]);
            }
        }
    }
}

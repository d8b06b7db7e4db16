use refeednet::datasets::{
    split, synth_dataset, synth_scene_in, Domain, LabeledImage, SceneParams, SplitSpec,
    TrafficClass,
};
use refeednet::micronet::{
    checkpoint_checksum, evaluate, load_checkpoint, pretrain_source, save_checkpoint, train,
    Architecture, Model, PretrainConfig, Tensor, TrainConfig,
};
use refeednet::prediction::{
    apply_correction, continuous_cycle, predict_and_store, transfer_corrections, RecordStore,
    Verdict,
};
use refeednet::refeed::{train_offline, ReFeedStack, RefeedConfig};
use refeednet::MicroCnn;

fn deployed(seed: u64) -> MicroCnn {
    let mut m: MicroCnn = pretrain_source(&PretrainConfig::new(seed)).unwrap();
    train_offline(&mut m, &synth_dataset(100, seed, Domain::Target), &RefeedConfig::new(seed)).unwrap();
    m
}

#[test]
fn pretraining_learns_the_source_task() {
    let cfg = PretrainConfig::new(3);
    let init = Model::<f64>::new(&cfg.architecture, cfg.seed).unwrap();
    let a: MicroCnn = pretrain_source(&cfg).unwrap();
    let b: MicroCnn = pretrain_source(&cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.base_param_values(), init.base_param_values());
    let held_out = synth_dataset(50, 1003, Domain::Source);
    let acc = evaluate(&a, held_out.items()).unwrap().accuracy;
    assert!(acc >= 0.90, "source accuracy {acc}");
}

#[test]
fn scratch_training_reaches_desk_scale_accuracy() {
    let seed = 1;
    let corpus = synth_dataset(100, seed, Domain::Target);
    let (tr, val) = split(&corpus, &SplitSpec::new(0.75, seed).unwrap()).unwrap();
    let mut m = Model::<f64>::new(&Architecture::standard(), seed).unwrap();
    let cfg = TrainConfig::with_seed(seed);
    assert_eq!((cfg.epochs, cfg.batch_size), (10, 10));
    let history = train(&mut m, tr.items(), val.items(), &cfg).unwrap();
    let acc = history.last().unwrap().val_accuracy.unwrap();
    assert!(acc >= 0.90, "held-out accuracy {acc}");
    assert_eq!(evaluate(&m, val.items()).unwrap().accuracy, acc);
}

#[test]
fn frozen_base_is_bitwise_stable_under_training() {
    let seed = 5;
    let mut m = Model::<f64>::new(&Architecture::standard(), seed).unwrap();
    m.freeze_base();
    let before: Vec<u64> = m.base_param_values().iter().map(|v| v.to_bits()).collect();
    let head_before = m.param_values();
    let data = synth_dataset(20, seed, Domain::Target);
    for augment in [false, true] {
        let cfg = TrainConfig {
            augment,
            epochs: 2,
            ..TrainConfig::with_seed(seed)
        };
        train(&mut m, data.items(), &[], &cfg).unwrap();
    }
    let after: Vec<u64> = m.base_param_values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert_ne!(m.param_values(), head_before);
}

#[test]
fn checkpoint_reproduces_evaluation() {
    let seed = 42;
    let mut m = Model::<f64>::new(&Architecture::standard(), seed).unwrap();
    let data = synth_dataset(15, seed, Domain::Target);
    train(&mut m, data.items(), &[], &TrainConfig { epochs: 2, ..TrainConfig::with_seed(seed) }).unwrap();
    let bytes = save_checkpoint(&m);
    let back: MicroCnn = load_checkpoint(&bytes).unwrap();
    assert_eq!(save_checkpoint(&back), bytes);
    assert_eq!(checkpoint_checksum(&bytes), checkpoint_checksum(&save_checkpoint(&back)));
    let test = synth_dataset(12, seed + 1, Domain::Target);
    assert_eq!(evaluate(&m, test.items()).unwrap(), evaluate(&back, test.items()).unwrap());
}

#[test]
fn evaluation_counts_match_a_reported_test_accuracy() {
    let mut m = Model::<f64>::new(&Architecture::standard(), 0).unwrap();
    m.zero_head();
    // Uniform output: every frame goes to the lowest class index.
    let blank = Tensor::<f64>::zeros(&[32, 32, 1]);
    let test: Vec<LabeledImage> = (0..192)
        .map(|i| {
            let label = if i < 126 { TrafficClass::Empty } else { TrafficClass::Jam };
            LabeledImage::new(blank.clone(), label, format!("f{i}")).unwrap()
        })
        .collect();
    let eval = evaluate(&m, &test).unwrap();
    assert_eq!(eval.correct_count(), 126);
    assert_eq!(eval.accuracy, 0.65625);
    assert!((eval.accuracy * 100.0 - 65.60).abs() < 0.05);
}

#[test]
fn trained_model_is_confident_on_jam_frames() {
    let m = deployed(0);
    let mut confident = 0;
    for seed in 0..100 {
        let (frame, _) = synth_scene_in(&SceneParams::TARGET, Domain::Target, TrafficClass::Jam, 50_000 + seed);
        let probs = m.forward(&frame.pixels).unwrap();
        if m.predict(&frame.pixels).unwrap() == TrafficClass::Jam.index()
            && probs.data()[TrafficClass::Jam.index()] > 0.5
        {
            confident += 1;
        }
    }
    assert!(confident >= 90, "{confident}/100");
}

#[test]
fn human_corrections_recover_accuracy_under_drift() {
    let mut improved = 0;
    for seed in 0..10 {
        let model = deployed(seed);
        let cfg = RefeedConfig::new(seed);
        let frames = synth_dataset(48, seed + 100, Domain::Shifted);
        let retest = synth_dataset(48, seed + 200, Domain::Shifted);
        let mut store = RecordStore::in_memory();
        let mut prediction_stack = ReFeedStack::new(1000).unwrap();
        let mut corrected = 0;
        for f in frames.iter() {
            if corrected == 20 {
                break;
            }
            let rec = predict_and_store(&model, &mut store, &f.pixels, f.source_id.clone(), 0).unwrap();
            if rec.predicted != f.label {
                let verdict = Verdict::Corrected { label: f.label };
                apply_correction(&mut store, &mut prediction_stack, rec.id, verdict, |_| Ok(f.pixels.clone()))
                    .unwrap();
                corrected += 1;
            }
        }
        assert_eq!(prediction_stack.len(), corrected);
        let mut training_stack = ReFeedStack::new(40).unwrap();
        transfer_corrections(&mut prediction_stack, &mut training_stack);
        let out = continuous_cycle(&model, &mut training_stack, &retest, &cfg, 1).unwrap();
        let rec = out.record.unwrap();
        assert!(training_stack.is_empty());
        if rec.pf > rec.p0 {
            improved += 1;
            assert!(rec.deployed);
        }
    }
    assert!(improved >= 8, "{improved}/10");
}

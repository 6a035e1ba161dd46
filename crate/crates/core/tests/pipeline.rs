use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptvc_core::audio::AudioClip;
use promptvc_core::dit::{ConditioningVariant, DiTConfig};
use promptvc_core::eval::{evaluate, EvalConfig, EvalReport};
use promptvc_core::factorize::EncoderConfig;
use promptvc_core::model::{LossOptions, Model, ModelConfig, StepDraws};
use promptvc_core::pipeline::{make_batch, train, Checkpoint, Dataset, Manifest, Split, TrainConfig, Trainer, CHECKPOINT_FILE, TRAIN_LOG};
use promptvc_core::synth::write_corpus;

fn quick_model() -> ModelConfig {
    ModelConfig {
        content_dim: 16,
        latent_dim: 16,
        speaker_dim: 16,
        encoder: EncoderConfig {
            wavenet_hidden: 8,
            wavenet_kernel: 3,
            content_layers: 2,
            pitch_layers: 2,
            dilation_cycle: 2,
            bottleneck_channels: 4,
            speaker_hidden: 16,
            speaker_heads: 2,
            speaker_kernel: 3,
        },
        dit: DiTConfig { layers: 1, hidden: 16, mlp: 32, heads: 2, variant: ConditioningVariant::AdalnSep },
        ..ModelConfig::desk()
    }
}

fn quick_config(steps: u64) -> TrainConfig {
    TrainConfig { model: quick_model(), total_steps: steps, batch_size: 2, max_frames: 24, seed: 5, log_every: 1, dev_every: 2, checkpoint_every: 0, ..TrainConfig::default() }
}

fn sine(secs: f64, hz: f64) -> AudioClip {
    let n = (secs * 16_000.0) as usize;
    AudioClip::new((0..n).map(|i| 0.3 * (std::f64::consts::TAU * hz * i as f64 / 16_000.0).sin()).collect()).unwrap()
}

fn two_sines(dir: &Path) -> Manifest {
    sine(1.0, 150.0).save_wav(dir.join("a.wav")).unwrap();
    sine(1.2, 230.0).save_wav(dir.join("b.wav")).unwrap();
    std::fs::write(dir.join("m.tsv"), "a.wav\tx\nb.wav\ty\n").unwrap();
    Manifest::load(dir.join("m.tsv")).unwrap()
}

fn prepared(manifest: &Manifest) -> Dataset {
    let entries: Vec<_> = manifest.entries.iter().enumerate().collect();
    Dataset::prepare(&entries, &quick_model(), &Default::default(), None).unwrap()
}

#[test]
fn one_second_and_a_fifth_pad_to_sixty_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&two_sines(dir.path()));
    assert_eq!(data.lengths(), vec![50, 60]);
    let batch = make_batch(&data, &[0, 1], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.padded_frames(), 60);
    assert_eq!(batch.padding[0].iter().filter(|&&p| p).count(), 10);
    assert!(batch.padding[0][50..].iter().all(|&p| p));
    assert!(batch.padding[1].iter().all(|&p| !p));
    assert!(batch.mel[0].slice(ndarray::s![50.., ..]).iter().all(|&v| v == 0.0));
}

#[test]
fn padding_never_reaches_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&two_sines(dir.path()));
    let model = Model::new(quick_model()).unwrap();
    let mut p = model.init_params(1);
    p.jitter(0.05, 2);
    let batch = make_batch(&data, &[0, 1], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let draws = StepDraws::sample(&batch.lengths, 80, Some(0.5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let loss = |b: &promptvc_core::pipeline::Batch| {
        let packed = b.pack(&model).unwrap();
        let lg = model.loss_graph(&p, &packed, &draws, &LossOptions::default(), true).unwrap();
        let grads = lg.graph.backward(lg.total).into_params();
        (lg.values(), grads)
    };
    let clean = loss(&batch);
    let mut dirty = batch.clone();
    dirty.mel[0].slice_mut(ndarray::s![50.., ..]).fill(1e6);
    dirty.content[0].slice_mut(ndarray::s![50.., ..]).fill(-3e3);
    dirty.pitch[0].slice_mut(ndarray::s![50.., ..]).fill(7.0);
    let noisy = loss(&dirty);
    assert_eq!(clean.0, noisy.0);
    assert_eq!(clean.1, noisy.1);
}

#[test]
fn cropping_respects_max_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(&two_sines(dir.path()));
    let batch = make_batch(&data, &[0, 1], Some(24), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(batch.lengths, vec![24, 24]);
    assert_eq!(batch.padded_frames(), 24);
    assert!(make_batch(&data, &[], None, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    assert!(make_batch(&data, &[9], None, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
}

#[test]
fn runs_are_deterministic_and_resume_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(write_corpus(dir.path().join("c"), 3, 1, 1).unwrap()).unwrap();

    let mut whole = Trainer::new(quick_config(4), &manifest).unwrap();
    whole.run(None).unwrap();
    let mut again = Trainer::new(quick_config(4), &manifest).unwrap();
    again.run(None).unwrap();
    assert_eq!(whole.checkpoint().to_bytes(), again.checkpoint().to_bytes());

    let mut half = Trainer::new(quick_config(2), &manifest).unwrap();
    half.run(None).unwrap();
    let path = dir.path().join("half.pvck");
    half.checkpoint().save(&path).unwrap();
    let mut ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 2);
    ck.config.total_steps = 4;
    let mut resumed = Trainer::resume(ck, &manifest).unwrap();
    resumed.run(None).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes(), whole.checkpoint().to_bytes());

    let mut other = quick_config(4);
    other.seed = 6;
    let mut different = Trainer::new(other, &manifest).unwrap();
    different.run(None).unwrap();
    assert_ne!(different.checkpoint().to_bytes(), whole.checkpoint().to_bytes());
}

#[test]
fn train_writes_logs_and_resumes_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(write_corpus(dir.path().join("c"), 3, 1, 2).unwrap()).unwrap();
    let out = dir.path().join("run");
    let ck = train(&manifest, quick_config(2), &out).unwrap();
    assert_eq!(ck.step, 2);
    assert!(out.join(CHECKPOINT_FILE).exists());
    let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.starts_with("step\tloss_cfm\tloss_rec\twall_time"));

    // a second call continues from the saved step
    let ck = train(&manifest, quick_config(3), &out).unwrap();
    assert_eq!(ck.step, 3);
}

#[test]
fn single_speaker_disables_mixup() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 3, 1, 0).unwrap();
    let text: String = std::fs::read_to_string(&corpus).unwrap().lines().filter(|l| l.contains("\tspk0")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&corpus, text).unwrap();
    let manifest = Manifest::load(&corpus).unwrap();
    let mut trainer = Trainer::new(quick_config(1), &manifest).unwrap();
    assert_eq!(trainer.mixup_rate(), None);
    let stats = trainer.train_step().unwrap();
    assert_eq!(stats.mixup_rate, 0.0);
    assert!(stats.loss_cfm.is_finite());
}

#[test]
fn manifest_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path();
    assert!(Manifest::parse("a.wav\n", base).is_err());
    assert!(Manifest::parse("a.wav\tspk\tholdout\n", base).is_err());
    let m = Manifest::parse("# comment\n\na.wav\tspk\nb.wav\tspk\tdev\n", base).unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.split(Split::Dev).len(), 1);
    assert_eq!(m.entries[0].path, base.join("a.wav"));
    std::fs::write(base.join("m.tsv"), "missing.wav\tspk\n").unwrap();
    assert!(Manifest::load(base.join("m.tsv")).is_err());

    let mut cfg = quick_config(1);
    cfg.lr = 0.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::from_toml("bogus_key = 1").is_err());
    let round = TrainConfig::from_toml(&quick_config(7).to_toml()).unwrap();
    assert_eq!(round, quick_config(7));
}

#[test]
fn evaluation_sweeps_step_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(write_corpus(dir.path().join("c"), 3, 1, 3).unwrap()).unwrap();
    let mut trainer = Trainer::new(quick_config(1), &manifest).unwrap();
    trainer.run(None).unwrap();
    let cfg = EvalConfig { steps: vec![1, 6], seed: 0, sources_per_pair: 2 };
    let report = evaluate(&manifest, &trainer.checkpoint(), &cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].steps, 1);
    let last = report.row(6).unwrap();
    assert_eq!(report.cross_win_rate, last.cross_win_rate);
    assert_eq!(report.mel_l1, last.mel_l1);
    // 2 speakers × 2 targets × 2 sources per step count
    assert_eq!(last.conversions, 8);
    assert_eq!(last.failures, 0);
    assert!(report.conversions.iter().filter(|c| c.is_cross()).all(|c| c.mel_l1.is_none()));
    assert_eq!(EvalReport::from_json(&report.to_json()).unwrap(), report);

    let none = EvalConfig { steps: vec![], ..cfg };
    assert!(evaluate(&manifest, &trainer.checkpoint(), &none).is_err());
}

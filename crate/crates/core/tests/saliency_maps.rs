//! Saliency locality and scale behaviour on the desk profile.

use ncrf::dataset::{synth_generate, SleepStage, SynthConfig};
use ncrf::model::{model_init, ModelConfig, ModelKind, Profile};
use ncrf::saliency::{input_gradient, saliency_map, signal_saliency, SaliencyTarget};

fn record() -> ncrf::dataset::Record {
    let config = SynthConfig {
        num_subjects: 1,
        epochs_per_subject: 12,
        ..SynthConfig::desk()
    };
    synth_generate(&config).unwrap().remove(0)
}

#[test]
fn no_gradient_beyond_the_receptive_field() {
    let r = record();
    for kind in [ModelKind::Softmax, ModelKind::Crf] {
        let cfg = ModelConfig::for_profile(Profile::Desk, kind);
        let p = model_init(&cfg, 4).unwrap();
        for t in [0, 5, 10] {
            let (_, last) = cfg.cnn.receptive_field(r.num_samples(), t).unwrap();
            let g = input_gradient(&p, &cfg, r.signal(), t, SleepStage::Light.index()).unwrap();
            assert!(g[last + 1..].iter().all(|&v| v == 0.0), "{kind} epoch {t}");
            assert!(g[..=last].iter().any(|&v| v != 0.0), "{kind} epoch {t}");
        }
    }
}

#[test]
fn perturbing_a_later_sample_leaves_the_map_unchanged() {
    let r = record();
    let cfg = ModelConfig::for_profile(Profile::Desk, ModelKind::Crf2);
    let p = model_init(&cfg, 5).unwrap();
    let t = 3;
    let (_, last) = cfg.cnn.receptive_field(r.num_samples(), t).unwrap();
    let target = SaliencyTarget::Class(SleepStage::Deep);
    let base = signal_saliency(&p, &cfg, r.signal(), t, target).unwrap();
    for pos in [last + 1, r.num_samples() - 1] {
        let mut x = r.signal().to_vec();
        x[pos] += 7.0;
        assert_eq!(signal_saliency(&p, &cfg, &x, t, target).unwrap(), base, "pos {pos}");
    }
}

#[test]
fn map_is_stable_under_tiny_rescaling() {
    let r = record();
    let cfg = ModelConfig::for_profile(Profile::Desk, ModelKind::Crf);
    let p = model_init(&cfg, 6).unwrap();
    let target = SaliencyTarget::Class(SleepStage::Rem);
    let base = saliency_map(&p, &cfg, &r, 7, target).unwrap();
    let same = signal_saliency(&p, &cfg, r.signal(), 7, target).unwrap();
    assert_eq!(base, same);
    for c in [1.0 - 1e-6, 1.0 + 1e-6] {
        let x: Vec<f64> = r.signal().iter().map(|v| v * c).collect();
        let scaled = signal_saliency(&p, &cfg, &x, 7, target).unwrap();
        let diff = base.iter().zip(&scaled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4, "c = {c}: {diff}");
    }
}

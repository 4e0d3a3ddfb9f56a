use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use ncrf::crf::transition_probabilities;
use ncrf::dataset::{
    load_records, read_manifest, read_signal, split_by_subject, synth_generate, write_labels, write_records,
    EpochTiming, Record, SleepStage, SynthConfig, DEFAULT_FRACTIONS, SKEWED_TRANSITION,
};
use ncrf::metrics::EvalReport;
use ncrf::model::{encode, model_init, predict, sequence_loss, ModelConfig, ModelKind, Profile};
use ncrf::numeric::{grad_check_filtered, primitive_checks, streams, Bound, SeedTree, Tape};
use ncrf::saliency::{export_saliency, signal_saliency, SaliencyTarget};
use ncrf::training::{self, Checkpoint, EpochStats, TrainConfig};

use crate::{EvalArgs, GradcheckArgs, InitArgs, InspectArgs, PredictArgs, SaliencyArgs, SplitArg, SynthArgs, TrainArgs};

/// Relative error above which `gradcheck` fails.
const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Class weights used by `gradcheck --cost-sensitive`.
const GRADCHECK_ALPHA: [f64; 4] = [0.5, 1.0, 2.0, 2.0];

fn synth_base(profile: Profile) -> SynthConfig {
    match profile {
        Profile::Desk => SynthConfig::desk(),
        Profile::Paper => SynthConfig::paper(),
        Profile::Tiny => SynthConfig {
            timing: EpochTiming::TINY,
            ..SynthConfig::desk()
        },
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn check_kind(ck: &Checkpoint, expected: Option<crate::KindArg>) -> Result<()> {
    if let Some(k) = expected {
        ck.expect_kind(k.into())?;
    }
    Ok(())
}

pub fn synth(profile: Profile, args: SynthArgs) -> Result<ExitCode> {
    let mut config = synth_base(profile);
    if args.skewed {
        config.transition = SKEWED_TRANSITION;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        config = config.apply_text(&text, path)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let records = synth_generate(&config)?;
    let manifest = write_records(&args.out, &records)?;
    fs::write(args.out.join("synth.cfg"), config.to_text())?;
    println!("wrote {} records; manifest {}", records.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}

pub fn init(profile: Profile, args: InitArgs) -> Result<ExitCode> {
    let config = ModelConfig::for_profile(profile, args.model.into());
    let ck = Checkpoint {
        params: model_init(&config, args.seed)?,
        config,
        info: [("train.seed".to_string(), args.seed.to_string())].into(),
    };
    ck.save(&args.out)?;
    println!("wrote untrained {} checkpoint {}", ck.kind(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn history_path(args: &TrainArgs) -> PathBuf {
    args.history.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    })
}

pub fn train(profile: Profile, args: TrainArgs) -> Result<ExitCode> {
    let model = ModelConfig::for_profile(profile, args.model.into());
    let records = load_records(&args.data, model.timing)
        .with_context(|| format!("loading corpus {}", args.data.display()))?;
    let split = split_by_subject(records, DEFAULT_FRACTIONS, args.seed)?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        cost_sensitive: args.cost_sensitive,
        l1_lambda: args.lambda,
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        transition_lr_scale: args.transition_lr_scale.unwrap_or(defaults.transition_lr_scale),
        max_epochs: args.max_epochs.unwrap_or(defaults.max_epochs),
        patience: args.patience.unwrap_or(defaults.patience),
        batch: args.batch.unwrap_or(defaults.batch),
        seed: args.seed,
        ..defaults
    };

    let hist_path = history_path(&args);
    let mut history = fs::File::create(&hist_path).with_context(|| format!("creating {}", hist_path.display()))?;
    writeln!(history, "{}", EpochStats::CSV_HEADER)?;
    let mut write_error = None;
    let outcome = training::train(&split.train, &split.validation, &model, &config, |s| {
        eprintln!("epoch {:>3}  loss {:.4}  validation kappa {:.4}", s.epoch, s.train_loss, s.val_kappa);
        if let Err(e) = writeln!(history, "{}", s.csv_row()).and_then(|()| history.flush()) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e).context("writing training history");
    }
    outcome.checkpoint.save(&args.out)?;
    println!(
        "best epoch {} with validation kappa {}; checkpoint {}",
        outcome.checkpoint.info["train.epoch"],
        outcome.checkpoint.info["train.val_kappa"],
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)?;
    check_kind(&ck, args.model)?;
    let records = load_records(&args.data, ck.config.timing)?;
    let records: Vec<Record> = if args.split == SplitArg::All {
        records
    } else {
        let seed = match args.seed {
            Some(s) => s,
            None => ck
                .info
                .get("train.seed")
                .context("checkpoint has no training seed; pass --seed")?
                .parse()
                .context("invalid train.seed in checkpoint")?,
        };
        let split = split_by_subject(records, DEFAULT_FRACTIONS, seed)?;
        match args.split {
            SplitArg::Train => split.train,
            SplitArg::Validation => split.validation,
            _ => split.test,
        }
    };
    if records.is_empty() {
        bail!("the selected split is empty");
    }
    let predictions: Vec<Vec<SleepStage>> = records
        .par_iter()
        .map(|r| predict(&ck.params, &ck.config, r.signal()))
        .collect::<ncrf::Result<_>>()?;
    let report = EvalReport::from_predictions(
        records
            .iter()
            .zip(&predictions)
            .map(|(r, p)| (r.subject_id(), r.labels(), p.as_slice())),
    )?;
    report.write(&args.out)?;
    print!("{}", report.summary());
    Ok(ExitCode::SUCCESS)
}

pub fn predict_cmd(args: PredictArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)?;
    check_kind(&ck, args.model)?;
    if let Some(signal) = &args.signal {
        let x = read_signal(signal)?;
        let stages = predict(&ck.params, &ck.config, &x)?;
        write_labels(&args.out, &stages)?;
        println!("wrote {} stages to {}", stages.len(), args.out.display());
        return Ok(ExitCode::SUCCESS);
    }
    let manifest = args.data.as_ref().context("either --signal or --data is required")?;
    fs::create_dir_all(&args.out)?;
    let entries = read_manifest(manifest)?;
    entries.par_iter().try_for_each(|e| -> Result<()> {
        let x = read_signal(&e.signal_path)?;
        let stages = predict(&ck.params, &ck.config, &x).with_context(|| format!("subject `{}`", e.subject_id))?;
        write_labels(&args.out.join(format!("{}.pred.csv", e.subject_id)), &stages)?;
        Ok(())
    })?;
    println!("wrote predictions for {} subjects to {}", entries.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn saliency(args: SaliencyArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let x = read_signal(&args.signal)?;
    let target = match &args.class {
        None => SaliencyTarget::Predicted,
        Some(tok) => SaliencyTarget::Class(
            SleepStage::from_token(tok).with_context(|| format!("unknown class `{tok}`; use W, R, L or D"))?,
        ),
    };
    let weights = signal_saliency(&ck.params, &ck.config, &x, args.epoch, target)?;
    let spe = ck.config.timing.samples_per_epoch();
    let epoch_signal = &x[args.epoch * spe..(args.epoch + 1) * spe];
    let (csv, pgm) = export_saliency(&weights, epoch_signal, &args.out)?;
    println!("wrote {} and {}", csv.display(), pgm.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(profile: Profile, args: GradcheckArgs) -> Result<ExitCode> {
    let profile = if args.tiny { Profile::Tiny } else { profile };
    let kind: ModelKind = args.model.into();
    let config = ModelConfig::for_profile(profile, kind);
    let params = model_init(&config, args.seed)?;
    let m = 4;
    let synth = SynthConfig {
        num_subjects: 1,
        epochs_per_subject: m,
        timing: config.timing,
        seed: args.seed,
        ..SynthConfig::desk()
    };
    let signal = synth_generate(&synth)?.remove(0).signal().to_vec();
    let labels: Vec<usize> = (0..m).map(|t| t % 4).collect();
    let alpha = args.cost_sensitive.then_some(&GRADCHECK_ALPHA);
    let loss = |tape: &mut Tape, b: &Bound| {
        let mut rng = SeedTree::new(0).rng();
        let (_, h) = encode(tape, b, &config, &signal, false, &mut rng)?;
        sequence_loss(tape, b, &config, h, &labels, alpha)
    };
    let samples = args.samples.unwrap_or(if args.tiny { usize::MAX } else { 200 });
    let mut rng = SeedTree::new(args.seed).child(streams::GRADCHECK).rng();
    let report = grad_check_filtered(loss, &params, 1e-5, samples, &mut rng, |n| n != "crf.edge_bias")?;

    if kind != ModelKind::Softmax {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = loss(&mut tape, &bound)?;
        let g = tape.backward(l)?.wrt(bound.get("crf.edge_bias")?).item();
        println!("edge bias gradient: {g:e} (cancels exactly in the likelihood)");
    }
    println!("{kind} loss: {} coordinates checked", report.checked);
    if let Some((name, i)) = &report.worst {
        println!("worst coordinate: {name}[{i}]");
    }
    let mut max = report.max_rel_error;
    if args.primitives {
        for (name, r) in primitive_checks(args.seed, 1e-5)? {
            println!("primitive {name:<16} {:e}", r.max_rel_error);
            max = max.max(r.max_rel_error);
        }
    }
    println!("max relative error: {max:e}");
    if max > GRADCHECK_TOLERANCE {
        eprintln!("gradient check failed: {max:e} > {GRADCHECK_TOLERANCE:e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// Row-normalized first-order transition matrix as CSV.
pub fn transition_csv(ck: &Checkpoint) -> Result<String> {
    if ck.kind().crf_order().is_none() {
        bail!("checkpoint holds a {} model, which has no transition matrix", ck.kind());
    }
    let probs = transition_probabilities(ck.params.get("crf.trans")?)?;
    let tokens: Vec<&str> = SleepStage::ALL.iter().map(|s| s.token()).collect();
    let mut out = format!("from\\to,{}\n", tokens.join(","));
    for from in SleepStage::ALL {
        let row: Vec<String> = SleepStage::ALL
            .iter()
            .map(|to| probs.at2(from.index(), to.index()).to_string())
            .collect();
        out.push_str(&format!("{},{}\n", from.token(), row.join(",")));
    }
    Ok(out)
}

pub fn inspect(args: InspectArgs) -> Result<ExitCode> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let csv = transition_csv(&ck)?;
    fs::write(&args.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

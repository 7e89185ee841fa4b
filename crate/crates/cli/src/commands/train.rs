use std::fmt::Write as _;
use std::path::Path;

use m2rnn_core::ParamSet;
use m2rnn_train::state_tracking::{group_model, recent_train_accuracy, write_length_csv};
use m2rnn_train::{
    evaluate_length_generalization, synthetic_corpus, train_char_lm, train_state_tracking, write_metrics_csv,
    CharLmConfig, StateTrackingConfig,
};

use crate::config::{RunConfig, Task};
use crate::error::{CliError, Result};
use crate::{checkpoint, create_file, Outcome};

/// Seed of the fresh evaluation sequences, kept apart from the training stream.
const EVAL_SALT: u64 = 0xe7a1_5eed;

fn write_metrics(path: &Path, rows: &[m2rnn_train::MetricRow]) -> Result<()> {
    let mut f = create_file(path)?;
    write_metrics_csv(&mut f, rows).map_err(|e| CliError::io(path, e))
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<u8>> {
    if cfg.corpus.is_empty() {
        Ok(synthetic_corpus(cfg.corpus_bytes, cfg.seed))
    } else {
        std::fs::read(&cfg.corpus).map_err(|e| CliError::io(&cfg.corpus, e))
    }
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let mut report = String::new();
    let metrics_path = cfg.out.join("metrics.csv");
    let ckpt = cfg.checkpoint_path();
    match cfg.task()? {
        Task::GroupWords => {
            let st = StateTrackingConfig {
                model: cfg.model_spec(1, 1)?,
                k: cfg.group_k,
                train_len: cfg.train_len,
                batch: cfg.batch,
                optim: cfg.optim(),
                seed: cfg.seed,
            };
            let run = train_state_tracking(&st)?;
            checkpoint::save(&ckpt, &run.model)?;
            write_metrics(&metrics_path, &run.metrics)?;
            let last = run.metrics.last().expect("at least one step");
            let _ = writeln!(
                report,
                "train {} on S_{} len {}: {} params, state {} per sequence",
                cfg.model,
                cfg.group_k,
                cfg.train_len,
                run.model.num_params(),
                run.model.spec.state_size()
            );
            let _ = writeln!(
                report,
                "final step {}: loss {:.6} accuracy {:.6} (mean of last 20 steps {:.6})",
                last.step,
                last.loss,
                last.accuracy,
                recent_train_accuracy(&run.metrics, 20)
            );
        }
        Task::CharLm => {
            let text = corpus(cfg)?;
            let lm = CharLmConfig {
                model: cfg.model_spec(1, 1)?,
                batch: cfg.batch,
                seq_len: cfg.seq_len,
                optim: cfg.optim(),
                eval_windows: cfg.eval_windows,
                seed: cfg.seed,
            };
            let run = train_char_lm(&text, &lm)?;
            checkpoint::save(&ckpt, &run.model)?;
            write_metrics(&metrics_path, &run.metrics)?;
            let _ = writeln!(
                report,
                "train {} on {} corpus bytes ({} symbols): {} params, state {} per sequence",
                cfg.model,
                text.len(),
                run.vocab.len(),
                run.model.num_params(),
                run.model.spec.state_size()
            );
            let first = run.metrics.first().expect("at least one step");
            let _ = writeln!(
                report,
                "first train loss {:.6}, held-out loss {:.6}",
                first.loss, run.final_loss
            );
        }
    }
    let _ = writeln!(report, "wrote {} and {}", ckpt.display(), metrics_path.display());
    crate::write_report(cfg, "train.txt", &report)?;
    Ok(Outcome { report, passed: true })
}

pub fn eval_lengths(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.task()? != Task::GroupWords {
        return Err(CliError::Config("eval-lengths needs task = \"s_k\"".into()));
    }
    let mut model = group_model(cfg.model_spec(1, 1)?, cfg.group_k, cfg.seed)?;
    checkpoint::load_into(&cfg.checkpoint_path(), &mut model)?;
    let rows = evaluate_length_generalization(
        &model,
        cfg.group_k,
        &cfg.eval_lengths,
        cfg.eval_count,
        cfg.seed ^ EVAL_SALT,
    )?;
    let path = cfg.out.join("eval_lengths.csv");
    let mut f = create_file(&path)?;
    write_length_csv(&mut f, &rows).map_err(|e| CliError::io(&path, e))?;
    let mut report = String::new();
    for r in &rows {
        let _ = writeln!(
            report,
            "length {:>5}: final-position accuracy {:.4}, all positions {:.4}, loss {:.4}",
            r.length, r.final_accuracy, r.position_accuracy, r.loss
        );
    }
    let _ = writeln!(report, "wrote {}", path.display());
    crate::write_report(cfg, "eval_lengths.txt", &report)?;
    Ok(Outcome { report, passed: true })
}

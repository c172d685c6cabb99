use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use segrec_core::corpus::{load_corpus, Corpus, Vocab};
use segrec_core::evaluator::{
    bench_speed, eval_vanilla_sliding, eval_windows_score_all, eval_xl, export_losses as export_table, EvalResult, LossTable,
};
use segrec_core::model::checkpoint::Checkpoint;
use segrec_core::model::Model;
use segrec_core::recl::{recl_search, ModelGroup};
use segrec_core::sampler::{generate as sample, SampleConfig};
use segrec_core::trainer::Trainer;

use crate::config::{Experiment, ReclOverrides};
use crate::{BenchArgs, DataArgs, EvalArgs, EvalMode, ExportArgs, Failure, GenerateArgs, ReclArgs, Split, TrainArgs};

fn json_line(w: &mut impl Write, value: &impl serde::Serialize) -> Result<(), Failure> {
    let s = serde_json::to_string(value).map_err(segrec_core::Error::from)?;
    writeln!(w, "{s}")?;
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut exp = Experiment::load(&args.config)?;
    if let Some(steps) = args.steps {
        exp.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        exp.model.seed = seed;
        exp.train.seed = seed;
    }
    if !exp.corpus.path.is_file() {
        return Err(Failure::Usage(format!("corpus {} does not exist", exp.corpus.path.display())));
    }
    let corpus = load_corpus(&exp.corpus.path, exp.corpus.vocab, exp.corpus.split)?;
    log::info!(
        "corpus {}: {} train / {} valid / {} test tokens, vocabulary {}",
        exp.corpus.path.display(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        corpus.vocab.size()
    );
    exp.model.vocab_size = corpus.vocab.size();

    let mut trainer = match &args.resume {
        Some(path) => {
            if !path.is_file() {
                return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
            }
            let ck = Checkpoint::load(path)?;
            if ck.header.vocab.as_ref() != Some(&corpus.vocab) {
                return Err(Failure::Usage(format!(
                    "checkpoint {} was trained with a different vocabulary",
                    path.display()
                )));
            }
            Trainer::resume(&ck, &corpus.train, Some(exp.train.clone()))?
        }
        None => Trainer::new(Model::new(exp.model.clone())?, exp.train.clone(), &corpus.train)?,
    };
    log::info!("{} parameters", trainer.model.params.count());

    let stdout = std::io::stdout();
    let mut sink: Box<dyn Write> = match &args.metrics {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(stdout.lock()),
    };
    let stop = args.until.unwrap_or(trainer.config.steps);
    trainer.run_until(stop, Some(&mut *sink), Some(&args.out), Some(&corpus.vocab))?;
    sink.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Vocab), Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    let vocab = match ck.header.vocab {
        Some(v) => v,
        None if model.config.vocab_size == 256 => Vocab::byte(),
        None => {
            return Err(Failure::Usage(format!(
                "checkpoint {} has no vocabulary to encode text with",
                path.display()
            )))
        }
    };
    if vocab.size() != model.config.vocab_size {
        return Err(Failure::Usage("checkpoint vocabulary does not match the model".into()));
    }
    Ok((model, vocab))
}

fn load_stream(args: &DataArgs, vocab: &Vocab) -> Result<Vec<usize>, Failure> {
    let raw = std::fs::read(&args.data).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.data.display())))?;
    let fractions: [f64; 3] = args
        .fractions
        .as_slice()
        .try_into()
        .map_err(|_| Failure::Usage("--fractions takes three values".into()))?;
    let corpus = Corpus::with_vocab(&raw, vocab.clone(), fractions)?;
    let mut stream = match args.split {
        Split::All => {
            let mut all = corpus.train;
            all.extend(corpus.valid);
            all.extend(corpus.test);
            all
        }
        Split::Train => corpus.train,
        Split::Valid => corpus.valid,
        Split::Test => corpus.test,
    };
    if let Some(n) = args.max_tokens {
        stream.truncate(n);
    }
    if stream.len() < 2 {
        return Err(Failure::Usage(format!("{:?} split has fewer than two tokens", args.split)));
    }
    Ok(stream)
}

#[derive(serde::Serialize)]
struct EvalSummary {
    tokens: usize,
    bpc: f64,
    ppl: f64,
    mean_nll: f64,
}

pub fn eval(args: EvalArgs) -> Result<(), Failure> {
    let (model, vocab) = load_model(&args.data.checkpoint)?;
    let stream = load_stream(&args.data, &vocab)?;
    let res: EvalResult = match args.mode {
        EvalMode::Xl => {
            if args.window.is_some() || args.score_all || args.batched {
                return Err(Failure::Usage("--window, --score-all and --batched apply to --mode vanilla".into()));
            }
            let m = args.mem_len.unwrap_or(model.config.mem_len_eval);
            if m > 0 && !model.config.recurrence {
                log::warn!("model was built without recurrence; --mem-len {m} has no effect");
            }
            eval_xl(&model, &stream, m)?
        }
        EvalMode::Vanilla => {
            if args.mem_len.is_some() {
                return Err(Failure::Usage("--mem-len applies to --mode xl".into()));
            }
            let w = args.window.unwrap_or(model.config.segment_len);
            if args.score_all {
                eval_windows_score_all(&model, &stream, w)?
            } else {
                eval_vanilla_sliding(&model, &stream, w, args.batched)?
            }
        }
    };
    if !res.mean_nll.is_finite() {
        return Err(Failure::Core(segrec_core::Error::NonFinite { op: "evaluation" }));
    }
    log::info!("{} tokens in {:.3}s ({:.1} tokens/s)", res.nll.len(), res.seconds, res.tokens_per_sec());
    let summary = EvalSummary {
        tokens: res.nll.len(),
        bpc: res.bpc,
        ppl: res.ppl,
        mean_nll: res.mean_nll,
    };
    json_line(&mut std::io::stdout().lock(), &summary)
}

pub fn bench(args: BenchArgs) -> Result<(), Failure> {
    let (model, vocab) = load_model(&args.data.checkpoint)?;
    let stream = load_stream(&args.data, &vocab)?;
    let rows = bench_speed(&model, &stream, &args.contexts, args.tokens)?;
    let mut out = std::io::stdout().lock();
    for row in &rows {
        json_line(&mut out, row)?;
    }
    Ok(())
}

pub fn export_losses(args: ExportArgs) -> Result<(), Failure> {
    let (model, vocab) = load_model(&args.data.checkpoint)?;
    let stream = load_stream(&args.data, &vocab)?;
    let model_id = args.model_id.clone().unwrap_or_else(|| {
        args.data
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let stream_id = args.stream_id.clone().unwrap_or_else(|| {
        let name = args
            .data
            .data
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        format!("{name}:{:?}", args.data.split).to_lowercase()
    });
    let table = export_table(&model, &stream, &args.contexts, &model_id, &stream_id)?;
    table.save(&args.out)?;
    log::info!("wrote {} positions × {} contexts to {}", table.count(), table.contexts.len(), args.out.display());
    Ok(())
}

pub fn recl(args: ReclArgs) -> Result<(), Failure> {
    if let Some(p) = args.tables.iter().find(|p| !p.is_file()) {
        return Err(Failure::Usage(format!("loss table {} does not exist", p.display())));
    }
    let tables = args
        .tables
        .iter()
        .map(LossTable::load)
        .collect::<segrec_core::Result<Vec<_>>>()?;
    let group = ModelGroup::new(tables)?;
    let mut settings = match &args.config {
        Some(p) => ReclOverrides::load(p)?,
        None => ReclOverrides::default(),
    };
    settings = settings.merge(ReclOverrides {
        r: args.r,
        delta: args.delta,
        initial_c: args.initial_c,
        threshold: args.threshold,
        max_c: args.max_c,
    });
    let cfg = settings.resolve(&group.tables()[0].contexts);
    let which: Vec<usize> = match &args.model {
        Some(id) => vec![group
            .index_of(id)
            .ok_or_else(|| Failure::Usage(format!("no table with model id {id:?}")))?],
        None => (0..group.len()).collect(),
    };
    let mut out = std::io::stdout().lock();
    for i in which {
        json_line(&mut out, &recl_search(&group, i, &cfg)?)?;
    }
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let (model, vocab) = load_model(&args.checkpoint)?;
    let raw = match &args.seed_file {
        Some(p) => std::fs::read(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => {
            let mut buf = Vec::new();
            std::io::stdin().read_to_end(&mut buf)?;
            buf
        }
    };
    let seed = vocab.encode(&raw)?;
    let cfg = SampleConfig {
        n_tokens: args.n_tokens,
        top_k: args.top_k,
        temperature: args.temperature,
        seed: args.seed,
    };
    let g = sample(&model, &seed, &cfg)?;
    if let Some(p) = &args.trace {
        let mut w = BufWriter::new(File::create(p)?);
        for s in &g.steps {
            json_line(&mut w, s)?;
        }
        w.flush()?;
    }
    let mut out = std::io::stdout().lock();
    out.write_all(&vocab.decode_bytes(&g.tokens)?)?;
    out.flush()?;
    Ok(())
}

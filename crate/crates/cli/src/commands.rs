use std::fs;
use std::path::{Path, PathBuf};

use knnmt::corpus::{tokenize, TextPair};
use knnmt::datastore::{train_ivf, Datastore};
use knnmt::decode::{grid_search, DecodeConfig, Decoder, Member};
use knnmt::eval::{bleu, corpus_wer};
use knnmt::model::{ModelDims, TrainConfig, Trainable};
use knnmt::ngram::{rank_by_overlap, LanguageModel, NgramLm};
use knnmt::pipeline::{self, diversify, DiversifyConfig, FilterConfig};
use knnmt::synth::{self, AdaptationBenchmark, AdaptationConfig, DomainShiftBenchmark, DomainShiftConfig};
use knnmt::{ParallelCorpus, RefModel, Vocab};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::artifact::{self, read_bundle, read_corpus, read_datastore, read_pairs, write_lines, write_pairs, Bundle, Run};
use crate::CliError;

/// Language tag for corpora that carry no adapter meaning.
const PLAIN_LANG: &str = "default";

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn token_lists(pairs: &[TextPair]) -> Vec<Vec<String>> {
    pairs.iter().flat_map(|p| [tokenize(&p.source), tokenize(&p.target)]).collect()
}

fn swap(pairs: Vec<TextPair>) -> Vec<TextPair> {
    pairs
        .into_iter()
        .map(|p| TextPair { source: p.target, target: p.source, ..p })
        .collect()
}

/// Writes to `out` and registers it, or prints to stdout.
fn emit(run: &mut Run, out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            run.output(path);
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn decode_config(r: &RetrievalArgs) -> DecodeConfig {
    DecodeConfig {
        k: r.k,
        temperature: r.temperature,
        weight: r.weight,
        beam: r.beam,
        max_len: r.max_len,
        ..Default::default()
    }
}

/// Loads models that must share one vocabulary, activating `lang` where
/// an adapter for it exists.
fn load_models(run: &mut Run, paths: &[PathBuf], lang: Option<&str>) -> Result<(Vocab, Vec<RefModel>), CliError> {
    let mut vocab: Option<Vocab> = None;
    let mut models = Vec::with_capacity(paths.len());
    for path in paths {
        run.input(path);
        let Bundle { vocab: v, mut model } = read_bundle(path)?;
        match &vocab {
            Some(first) if first.tokens() != v.tokens() => {
                return Err(CliError::Data(format!("{}: vocabulary differs from the first model", path.display())));
            }
            Some(_) => {}
            None => vocab = Some(v),
        }
        if let Some(lang) = lang {
            model.set_active(Some(lang));
        }
        models.push(model);
    }
    if let Some(lang) = lang {
        if models.iter().all(|m| m.active_lang().is_none()) {
            return Err(CliError::Data(format!("no model has an adapter for '{lang}'")));
        }
    }
    Ok((vocab.expect("at least one model"), models))
}

fn load_datastores(run: &mut Run, paths: &[PathBuf], models: usize) -> Result<Vec<Datastore>, CliError> {
    if !paths.is_empty() && paths.len() != models {
        return Err(usage(format!("got {} datastores for {} models", paths.len(), models)));
    }
    paths
        .iter()
        .map(|p| {
            run.input(p);
            read_datastore(p)
        })
        .collect()
}

fn members<'a>(models: &'a [RefModel], datastores: &'a [Datastore]) -> Vec<Member<'a>> {
    models
        .iter()
        .enumerate()
        .map(|(i, m)| Member::new(m, datastores.get(i)))
        .collect()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.common.seed,
        clip_norm: a.clip_norm,
    };
    cfg.validate().map_err(usage)?;
    if a.init.is_some() && !a.vocab_corpus.is_empty() {
        return Err(usage("--vocab-corpus cannot be combined with --init: the vocabulary comes from the initial model"));
    }
    let dims = |vocab_size| ModelDims {
        emb_dim: a.emb_dim,
        hidden_dim: a.hidden_dim,
        vocab_size,
        adapter_rank: a.adapter_rank,
    };
    dims(1).validate().map_err(usage)?;

    let mut run = Run::start("train");
    run.input(&a.corpus);
    let mut pairs = read_pairs(&a.corpus)?;
    if a.reverse {
        pairs = swap(pairs);
    }
    let (vocab, mut model) = match &a.init {
        Some(path) => {
            run.input(path);
            let b = read_bundle(path)?;
            (b.vocab, b.model)
        }
        None => {
            let mut lists = token_lists(&pairs);
            for extra in &a.vocab_corpus {
                run.input(extra);
                lists.extend(token_lists(&read_pairs(extra)?));
            }
            let vocab = Vocab::build(&lists, a.max_vocab).map_err(usage)?;
            let model = RefModel::new(dims(vocab.len()), a.common.seed)?;
            (vocab, model)
        }
    };
    let corpus = ParallelCorpus::from_text(&pairs, &vocab, &a.lang).map_err(|e| CliError::from(e).in_file(&a.corpus))?;
    let trainable = if a.adapters_only { Trainable::AdaptersOnly } else { Trainable::All };
    eprintln!("training on {} pairs, vocabulary {}, {} epochs", corpus.len(), vocab.len(), cfg.epochs);
    let report = model.train(&corpus, &cfg, trainable)?;
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {loss:.4}", i + 1);
    }
    artifact::write_bundle(&a.out, &Bundle { vocab, model })?;
    run.output(&a.out);
    let counts = json!({
        "pairs": corpus.len(),
        "epochs": cfg.epochs,
        "final_loss": report.epoch_losses.last(),
    });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn build_datastore(a: &BuildDatastoreArgs) -> Result<(), CliError> {
    if a.ivf_clusters == Some(0) || a.nprobe == 0 || a.ivf_iterations == 0 {
        return Err(usage("--ivf-clusters, --ivf-iterations and --nprobe must be positive"));
    }
    let mut run = Run::start("build-datastore");
    let (vocab, models) = load_models(&mut run, std::slice::from_ref(&a.model), a.lang.as_deref())?;
    run.input(&a.corpus);
    let (_, corpus) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    let mut ds = Datastore::build(&models[0], &corpus)?;
    if let Some(clusters) = a.ivf_clusters {
        let index = train_ivf(&ds, clusters, a.ivf_iterations, a.common.seed)?;
        ds.set_index(index.with_nprobe(a.nprobe))?;
    }
    eprintln!("datastore: {} entries of dimension {}", ds.len(), ds.dim());
    artifact::write_datastore(&a.out, &ds)?;
    run.output(&a.out);
    let counts = json!({ "pairs": corpus.len(), "entries": ds.len(), "dim": ds.dim() });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

#[derive(Serialize)]
struct DecodeLine<'a> {
    id: usize,
    source: &'a str,
    hypothesis: String,
    score: f64,
    config: &'a DecodeConfig,
}

#[derive(Serialize)]
struct ScoreLine<D: Serialize> {
    metric: Metric,
    value: f64,
    details: D,
}

pub fn decode(a: &DecodeArgs) -> Result<(), CliError> {
    let cfg = DecodeConfig {
        fusion_alpha: a.fusion_alpha,
        exclude_talk: a.exclude_talk,
        ..decode_config(&a.retrieval)
    };
    cfg.validate().map_err(usage)?;
    if cfg.fusion_alpha > 0.0 && a.lm.is_none() {
        return Err(usage("--fusion-alpha needs --lm"));
    }
    if !a.datastores.is_empty() && a.datastores.len() != a.models.len() {
        return Err(usage(format!("got {} datastores for {} models", a.datastores.len(), a.models.len())));
    }
    let mut run = Run::start("decode");
    let (vocab, models) = load_models(&mut run, &a.models, a.retrieval.lang.as_deref())?;
    let datastores = load_datastores(&mut run, &a.datastores, models.len())?;
    let lm = match &a.lm {
        Some(path) => {
            run.input(path);
            Some(NgramLm::read(artifact::open(path)?, vocab.len()).map_err(|e| CliError::from(e).in_file(path))?)
        }
        None => None,
    };
    run.input(&a.corpus);
    let (pairs, corpus) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    // without a datastore the run is reported as retrieval-off
    let effective = if datastores.is_empty() { cfg.without_retrieval() } else { cfg };
    let members = members(&models, &datastores);
    let decoder = Decoder::new(&members).with_lm(lm.as_ref().map(|l| l as &dyn LanguageModel));
    eprintln!("decoding {} sentences", corpus.len());
    let hyps = decoder.decode_all(&corpus.sources(), &effective)?;
    let mut text = String::new();
    for (i, (h, p)) in hyps.iter().zip(&pairs).enumerate() {
        let line = DecodeLine {
            id: i,
            source: &p.source,
            hypothesis: vocab.decode_text(&h.sentence()),
            score: h.score,
            config: &effective,
        };
        text.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Data(e.to_string()))?);
        text.push('\n');
    }
    emit(&mut run, a.out.as_deref(), &text)?;
    run.finish(a, a.common.seed, json!({ "sentences": hyps.len() }), a.common.manifest.as_deref())
}

pub fn grid_search_cmd(a: &GridSearchArgs) -> Result<(), CliError> {
    let base = DecodeConfig {
        k: a.k,
        beam: a.beam,
        ..Default::default()
    };
    for &t in &a.t_grid {
        for &w in &a.w_grid {
            DecodeConfig { temperature: t, weight: w, ..base.clone() }.validate().map_err(usage)?;
        }
    }
    let mut run = Run::start("grid-search");
    let (vocab, models) = load_models(&mut run, &a.models, a.lang.as_deref())?;
    let datastores = load_datastores(&mut run, &a.datastores, models.len())?;
    run.input(&a.corpus);
    let (_, dev) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    let members = members(&models, &datastores);
    let result = grid_search(&Decoder::new(&members), &dev, &a.t_grid, &a.w_grid, &base, a.leave_one_out)?;
    eprintln!("best: T={} w={} BLEU={:.4}", result.best.temperature, result.best.weight, result.best.bleu);
    emit(&mut run, a.out.as_deref(), &result.to_tsv())?;
    let counts = json!({ "cells": result.table.len(), "best": result.best });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn diversify_cmd(a: &DiversifyArgs) -> Result<(), CliError> {
    let cfg = DiversifyConfig {
        rounds: a.rounds,
        beam: a.beam,
        dedup: !a.no_dedup,
    };
    if cfg.rounds == 0 || cfg.beam == 0 {
        return Err(usage("--rounds and --beam must be positive"));
    }
    let mut run = Run::start("diversify");
    let (vocab, models) = load_models(&mut run, &[a.forward.clone(), a.backward.clone()], None)?;
    run.input(&a.corpus);
    let (_, bitext) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    let out = diversify(&bitext, &models[0], &models[1], &cfg)?;
    eprintln!("{} original pairs, {} after diversification", bitext.len(), out.len());
    write_pairs(&a.out, &out.to_text(&vocab))?;
    run.output(&a.out);
    let counts = json!({ "original": bitext.len(), "output": out.len() });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn select_data(a: &SelectDataArgs) -> Result<(), CliError> {
    if a.max_order == 0 {
        return Err(usage("--max-order must be at least 1"));
    }
    let mut run = Run::start("select-data");
    run.input(&a.pool);
    run.input(&a.seed_corpus);
    let pool = read_pairs(&a.pool)?;
    let seed = read_pairs(&a.seed_corpus)?;
    if a.top_k > pool.len() {
        return Err(CliError::Data(format!("--top-k {} exceeds the pool size {}", a.top_k, pool.len())));
    }
    let mut lists = token_lists(&pool);
    lists.extend(token_lists(&seed));
    let vocab = Vocab::build(&lists, usize::MAX)?;
    let pool_corpus = ParallelCorpus::from_text(&pool, &vocab, PLAIN_LANG)?;
    let seed_corpus = ParallelCorpus::from_text(&seed, &vocab, PLAIN_LANG)?;
    let ranked = rank_by_overlap(&pool_corpus, &seed_corpus.sources(), a.max_order);
    let chosen: Vec<TextPair> = ranked.iter().take(a.top_k).map(|&(i, _)| pool[i].clone()).collect();
    write_pairs(&a.out, &chosen)?;
    run.output(&a.out);
    let counts = json!({ "pool": pool.len(), "selected": chosen.len() });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn leave_one_out(a: &LeaveOneOutArgs) -> Result<(), CliError> {
    let cfg = decode_config(&a.retrieval);
    cfg.validate().map_err(usage)?;
    let mut run = Run::start("leave-one-out");
    let (vocab, models) = load_models(&mut run, &a.models, a.retrieval.lang.as_deref())?;
    let mut datastores = load_datastores(&mut run, &a.datastores, models.len())?;
    run.input(&a.corpus);
    let (_, talks) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    if datastores.is_empty() {
        for m in &models {
            datastores.push(Datastore::build(m, &talks)?);
        }
    }
    let members = members(&models, &datastores);
    let report = pipeline::leave_one_out_eval(&Decoder::new(&members), &talks, &cfg)?;
    for t in &report.talks {
        eprintln!(
            "talk {:>4}: {} sentences, BLEU {:.2} -> {:.2} ({:+.2})",
            t.talk_id, t.sentences, t.bleu_base, t.bleu_knn, t.delta
        );
    }
    let own: u64 = report.talks.iter().map(|t| t.own_talk_retrievals).sum();
    if own != 0 {
        return Err(CliError::Data(format!("{own} retrievals leaked from the talk being decoded")));
    }
    let knn_text: Vec<String> = report.hyps_knn.iter().map(|h| vocab.decode_text(&h.sentence())).collect();
    let base_text: Vec<String> = report.hyps_base.iter().map(|h| vocab.decode_text(&h.sentence())).collect();
    let term_recall = match &a.terms {
        Some(path) => {
            run.input(path);
            let terms: Vec<String> = artifact::read_lines(path)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
            let refs: Vec<Vec<String>> = talks.targets().iter().map(|t| vocab.decode(t)).collect();
            let split = |v: &[String]| v.iter().map(|s| tokenize(s)).collect::<Vec<_>>();
            Some(json!({
                "base": synth::term_recall(&split(&base_text), &refs, &terms)?,
                "knn": synth::term_recall(&split(&knn_text), &refs, &terms)?,
            }))
        }
        None => None,
    };
    let body = json!({ "config": cfg, "report": report, "term_recall": term_recall });
    let text = serde_json::to_string_pretty(&body).map_err(|e| CliError::Data(e.to_string()))? + "\n";
    emit(&mut run, a.out.as_deref(), &text)?;
    if let Some(path) = &a.hyps_out {
        write_lines(path, &knn_text)?;
        run.output(path);
    }
    if let Some(path) = &a.base_hyps_out {
        write_lines(path, &base_text)?;
        run.output(path);
    }
    let counts = json!({ "talks": report.talks.len(), "sentences": talks.len(), "queries": report.queries });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

fn hypothesis_text(line: &str) -> Result<String, CliError> {
    if !line.trim_start().starts_with('{') {
        return Ok(line.to_string());
    }
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| CliError::Data(format!("bad JSON line: {e}")))?;
    v.get("hypothesis")
        .and_then(|h| h.as_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Data("JSON line has no \"hypothesis\" string".into()))
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let mut run = Run::start("score");
    run.input(&a.hyp);
    let hyps: Vec<Vec<String>> = artifact::read_lines(&a.hyp)?
        .iter()
        .map(|l| hypothesis_text(l).map(|h| tokenize(&h)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.in_file(&a.hyp))?;
    let refs: Vec<Vec<String>> = match (&a.r#ref, &a.ref_corpus) {
        (Some(path), _) => {
            run.input(path);
            artifact::read_lines(path)?.iter().map(|l| tokenize(l)).collect()
        }
        (None, Some(path)) => {
            run.input(path);
            read_pairs(path)?.iter().map(|p| tokenize(&p.target)).collect()
        }
        (None, None) => return Err(usage("one of --ref or --ref-corpus is required")),
    };
    let out = match a.metric {
        Metric::Bleu => {
            let r = bleu(&hyps, &refs)?;
            serde_json::to_string(&ScoreLine { metric: a.metric, value: r.bleu, details: r })
        }
        Metric::Wer => {
            let r = corpus_wer(&hyps, &refs)?;
            serde_json::to_string(&ScoreLine { metric: a.metric, value: r.wer, details: r })
        }
    }
    .map_err(|e| CliError::Data(e.to_string()))?;
    println!("{out}");
    run.finish(a, a.common.seed, json!({ "segments": hyps.len() }), a.common.manifest.as_deref())
}

pub fn filter(a: &FilterArgs) -> Result<(), CliError> {
    let cfg = FilterConfig {
        max_ratio: a.max_ratio,
        max_len: a.max_len,
    };
    if !(cfg.max_ratio > 1.0) {
        return Err(usage("--max-ratio must exceed 1"));
    }
    let mut run = Run::start("filter");
    run.input(&a.corpus);
    let pairs = read_pairs(&a.corpus)?;
    let vocab = Vocab::build(&token_lists(&pairs), usize::MAX)?;
    let corpus = ParallelCorpus::from_text(&pairs, &vocab, PLAIN_LANG)?;
    let kept = pipeline::filter(&corpus, &cfg)?;
    eprintln!("kept {} of {} pairs", kept.len(), corpus.len());
    write_pairs(&a.out, &kept.to_text(&vocab))?;
    run.output(&a.out);
    let counts = json!({ "input": corpus.len(), "kept": kept.len() });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn train_lm(a: &TrainLmArgs) -> Result<(), CliError> {
    if a.order == 0 {
        return Err(usage("--order must be at least 1"));
    }
    let mut run = Run::start("train-lm");
    run.input(&a.model);
    let vocab = read_bundle(&a.model)?.vocab;
    run.input(&a.corpus);
    let (_, corpus) = read_corpus(&a.corpus, &vocab, PLAIN_LANG)?;
    let sentences = match a.side {
        Side::Source => corpus.sources(),
        Side::Target => corpus.targets(),
    };
    let lm = NgramLm::train(&sentences, a.order, vocab.len())?;
    let mut w = artifact::create(&a.out)?;
    lm.write(&mut w)?;
    std::io::Write::flush(&mut w)?;
    run.output(&a.out);
    let counts = json!({ "sentences": sentences.len(), "ngrams": lm.num_ngrams() });
    run.finish(a, a.common.seed, counts, a.common.manifest.as_deref())
}

pub fn make_benchmark(a: &MakeBenchmarkArgs) -> Result<(), CliError> {
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let mut run = Run::start("make-benchmark");
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    let seed = a.common.seed;
    let mut files: Vec<(&str, Vec<TextPair>)> = Vec::new();
    let mut terms = None;
    match a.kind {
        BenchmarkKind::DomainShift => {
            let b = DomainShiftBenchmark::generate(&DomainShiftConfig { seed, ..Default::default() })?;
            files.push(("general.tsv", b.general));
            files.push(("talks.tsv", b.talks));
            terms = Some(b.terms);
        }
        BenchmarkKind::Adaptation => {
            let cfg = AdaptationConfig {
                seed: seed.wrapping_add(1),
                language: DomainShiftConfig { seed, ..Default::default() },
                ..Default::default()
            };
            let b = AdaptationBenchmark::generate(&cfg)?;
            files.push(("base.tsv", b.base));
            files.push(("bitext.tsv", b.bitext));
            files.push(("dev.tsv", b.dev));
        }
        BenchmarkKind::Copy => files.push(("copy.tsv", synth::copy_pairs(seed, a.size, 20, 3..=8))),
        BenchmarkKind::Restoration => files.push((
            "restoration.tsv",
            pipeline::restoration_pairs(&synth::restoration_sentences(seed, a.size)),
        )),
    }
    let mut counts = serde_json::Map::new();
    for (name, pairs) in &files {
        let path = a.out_dir.join(name);
        write_pairs(&path, pairs)?;
        run.output(&path);
        counts.insert(name.to_string(), json!(pairs.len()));
    }
    if let Some(terms) = terms {
        let path = a.out_dir.join("terms.txt");
        write_lines(&path, &terms)?;
        run.output(&path);
        counts.insert("terms.txt".into(), json!(terms.len()));
    }
    eprintln!("wrote {} files to {}", counts.len(), a.out_dir.display());
    let manifest = a.common.manifest.clone().unwrap_or_else(|| a.out_dir.join("manifest.json"));
    run.finish(a, seed, counts.into(), Some(&manifest))
}

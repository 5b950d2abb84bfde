use knnmt::corpus::tokenize;
use knnmt::decode::{DecodeConfig, Decoder, Member};
use knnmt::model::{ModelDims, TrainConfig, Trainable};
use knnmt::pipeline::{restoration_f1, restoration_pairs};
use knnmt::synth::restoration_sentences;
use knnmt::{ParallelCorpus, RefModel, Vocab};

// Regression floor for case and punctuation restoration on its own
// training data.
const MIN_F1: f64 = 0.9;

#[test]
fn restoration_round_trip_on_training_data() {
    let pairs = restoration_pairs(&restoration_sentences(5, 300));
    let lists: Vec<Vec<String>> = pairs
        .iter()
        .flat_map(|p| [tokenize(&p.source), tokenize(&p.target)])
        .collect();
    let vocab = Vocab::build(&lists, 10_000).unwrap();
    let corpus = ParallelCorpus::from_text(&pairs, &vocab, "restore").unwrap();
    let mut model = RefModel::new(ModelDims::new(vocab.len()), 3).unwrap();
    model
        .train(&corpus, &TrainConfig { epochs: 80, ..Default::default() }, Trainable::All)
        .unwrap();

    let members = [Member::new(&model, None)];
    let hyps = Decoder::new(&members)
        .decode_all(&corpus.sources(), &DecodeConfig::default().without_retrieval())
        .unwrap();
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(&h.sentence())).collect();
    let refs: Vec<Vec<String>> = corpus.targets().iter().map(|t| vocab.decode(t)).collect();
    let f1 = restoration_f1(&hyps, &refs).unwrap();
    eprintln!("restoration F1 {:.4} (P {:.4}, R {:.4})", f1.f1, f1.precision, f1.recall);
    assert!(f1.f1 >= MIN_F1, "F1 {} below floor {MIN_F1}", f1.f1);
}

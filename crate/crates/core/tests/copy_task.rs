use knnmt::corpus::tokenize;
use knnmt::datastore::Datastore;
use knnmt::decode::{DecodeConfig, Decoder, Member};
use knnmt::model::{ModelDims, TrainConfig, Trainable};
use knnmt::synth::copy_pairs;
use knnmt::{ParallelCorpus, RefModel, Vocab};

#[test]
fn retrieval_decoding_copies_training_sources() {
    let pairs = copy_pairs(4, 60, 12, 3..=6);
    let lists: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(&p.source)).collect();
    let vocab = Vocab::build(&lists, 1000).unwrap();
    let corpus = ParallelCorpus::from_text(&pairs, &vocab, "copy").unwrap();
    let mut model = RefModel::new(ModelDims::new(vocab.len()), 9).unwrap();
    model
        .train(&corpus, &TrainConfig { epochs: 300, ..Default::default() }, Trainable::All)
        .unwrap();
    let ds = Datastore::build(&model, &corpus).unwrap();
    let members = [Member::new(&model, Some(&ds))];
    let cfg = DecodeConfig { k: 8, temperature: 50.0, weight: 0.3, beam: 4, ..Default::default() };
    let hyps = Decoder::new(&members).decode_all(&corpus.sources(), &cfg).unwrap();
    let wrong = hyps
        .iter()
        .zip(&corpus.pairs)
        .filter(|(h, p)| h.tokens != p.source.ids())
        .count();
    assert_eq!(wrong, 0, "{wrong} of {} sources not copied", hyps.len());
}

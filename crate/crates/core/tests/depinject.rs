mod common;

use common::*;
use redbert_core::datapipe::TrainingInstance;
use redbert_core::depinject::*;
use redbert_core::encoder::{Batch, Ctx, ModelConfig};
use redbert_core::model::Model;
use redbert_core::tensor::{Graph, ParamStore, Tensor};
use redbert_core::trainkit::{fit_batch, TrainRunConfig};
use redbert_core::Error;

fn branch(config: &ModelConfig, seed: u64) -> (DepBranch, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let b = DepBranch::new(config, 0, &mut store, &mut rng(seed)).unwrap();
    (b, store)
}

#[test]
fn lookup_and_side_transform_shapes() {
    let v = toy_vocab(40);
    let config = ModelConfig {
        dep_dim: 300,
        dep_heads: 4,
        dep_ff_size: 64,
        ..ModelConfig::desk(v.len())
    };
    let (b, store) = branch(&config, 1);
    let pair = random_pair(&v, 30, Some(20), 128, &mut rng(2));
    let batch = Batch::from_pairs([&pair]).unwrap();
    let mut g = Graph::new();
    let d = b.lookup(&mut g, &store, &batch).unwrap();
    assert_eq!(g.shape(d), &[1, 128, 300]);
    let bias = batch.attention_bias(&mut g).unwrap();
    let mut r = rng(0);
    let t = b.side_transform(&mut g, &store, d, &batch, bias, &mut Ctx::eval(&mut r)).unwrap();
    assert_eq!(g.shape(t), &[1, 128, 300]);
    // Wrong trailing width.
    let bad = g.constant(Tensor::<f32>::zeros(&[1, 128, 299]));
    assert!(matches!(
        b.side_transform(&mut g, &store, bad, &batch, bias, &mut Ctx::eval(&mut r)),
        Err(Error::Tensor(_))
    ));
}

#[test]
fn injected_width_is_dep_plus_hidden() {
    let v = toy_vocab(40);
    for (hidden, heads) in [(64, 4), (768, 12)] {
        let config = ModelConfig {
            hidden_size: hidden,
            num_heads: heads,
            ff_size: 32,
            num_layers: 1,
            max_len: 6,
            max_position: 6,
            dep_ff_size: 32,
            ..ModelConfig::desk(v.len())
        }
        .with_injection(true);
        assert_eq!(config.output_width(), hidden + 300);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&config, v.pad_id(), &mut store, &mut rng(1)).unwrap();
        let pair = random_pair(&v, 2, Some(1), 6, &mut rng(2));
        let batch = Batch::from_pairs([&pair, &pair]).unwrap();
        let mut g = Graph::new();
        let mut r = rng(0);
        let f = bb.forward(&mut g, &store, &batch, &mut Ctx::eval(&mut r)).unwrap();
        assert_eq!(g.shape(f.output), &[2, 6, hidden + 300]);
    }
}

#[test]
fn inject_puts_t_first_and_checks_lengths() {
    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, 2.0]).unwrap());
    let h = g.constant(Tensor::from_f64(&[1, 2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = inject(&mut g, t, h).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let short = g.constant(Tensor::<f64>::zeros(&[1, 3, 2]));
    assert!(matches!(inject(&mut g, t, short), Err(Error::Tensor(_))));
}

#[test]
fn pad_row_is_zero_and_pinned() {
    let v = toy_vocab(30);
    let config = tiny_config(v.len(), 8).with_injection(true);
    let (b, store) = branch(&config, 3);
    let table = store.value(b.table);
    assert!(table.row(v.pad_id()).iter().all(|&x| x == 0.0));
    assert!(table.row(v.pad_id() + 1).iter().any(|&x| x != 0.0));
    assert_eq!(store.get(b.table).pinned_rows(), &[v.pad_id()]);
}

#[test]
fn out_of_range_token_is_data_error() {
    let v = toy_vocab(30);
    let config = tiny_config(v.len(), 8).with_injection(true);
    let (b, store) = branch(&config, 3);
    let mut pair = random_pair(&v, 3, None, 8, &mut rng(1));
    pair.ids[3] = 30;
    let batch = Batch::from_pairs([&pair]).unwrap();
    let mut g = Graph::new();
    match b.lookup(&mut g, &store, &batch) {
        Err(Error::Data(m)) => assert!(m.contains("position 3"), "{m}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn file_vectors_are_copied_exactly() {
    let v = toy_vocab(12);
    let text = "3 4\nw6 0.125 -1.5 3 1e-3\nw9 1 2 3 4\nabsent 9 9 9 9\n";
    let vectors = parse_word2vec(text).unwrap();
    let (table, copied) = align_dep_table(&v, Some(&vectors), 4, &mut rng(1)).unwrap();
    assert_eq!(copied, 2);
    assert_eq!(table.row(v.id("w6").unwrap()), &[0.125, -1.5, 3.0, 1e-3]);
    assert_eq!(table.row(v.id("w9").unwrap()), &[1.0, 2.0, 3.0, 4.0]);
    assert!(table.row(v.pad_id()).iter().all(|&x| x == 0.0));

    let mut model = Model::init(ModelConfig { dep_dim: 4, dep_heads: 2, ..tiny_config(12, 8) }.with_injection(true), v.clone(), 0).unwrap();
    assert_eq!(model.set_dep_vectors(&vectors, 0).unwrap(), 2);
    let dw = model.store.value(model.net.backbone.deps.as_ref().unwrap().table);
    assert_eq!(dw.row(v.id("w9").unwrap()), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn file_dimension_mismatch_is_config_error() {
    let v = toy_vocab(12);
    let vectors = parse_word2vec("1 3\nw6 1 2 3\n").unwrap();
    assert!(matches!(align_dep_table(&v, Some(&vectors), 4, &mut rng(1)), Err(Error::Config(_))));
}

#[test]
fn malformed_vector_files_are_data_errors() {
    for text in ["", "x y\n", "2 2\nw 1 2\n", "1 2\nw 1\n", "1 2\nw 1 nan?\n"] {
        assert!(matches!(parse_word2vec(text), Err(Error::Data(_))), "{text:?}");
    }
    let v = parse_word2vec("2 3\na 1 2 3\nb -1 0.5 2\n").unwrap();
    assert_eq!(parse_word2vec(&v.to_text()).unwrap(), v);
}

#[test]
fn side_transform_ignores_padding() {
    let v = toy_vocab(30);
    let config = tiny_config(v.len(), 16).with_injection(true);
    let (b, store) = branch(&config, 4);
    let mut r = rng(5);
    let a = random_ids(&v, 4, &mut r);
    let short = redbert_core::tokenizer::encode_ids(&a, None, &v, 6).unwrap();
    let long = redbert_core::tokenizer::encode_ids(&a, None, &v, 16).unwrap();
    let run = |pair| {
        let batch = Batch::from_pairs([pair]).unwrap();
        let mut g = Graph::new();
        let d = b.lookup(&mut g, &store, &batch).unwrap();
        let bias = batch.attention_bias(&mut g).unwrap();
        let mut r = rng(0);
        let t = b.side_transform(&mut g, &store, d, &batch, bias, &mut Ctx::eval(&mut r)).unwrap();
        g.value(t).clone()
    };
    let (ts, tl) = (run(&short), run(&long));
    for p in 0..6 {
        for (x, y) in ts.row(p).iter().zip(tl.row(p)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

fn tiny_instance(v: &redbert_core::tokenizer::Vocab) -> Vec<TrainingInstance> {
    let mut r = rng(7);
    (0..2)
        .map(|i| {
            let pair = random_pair(v, 3, Some(3), 10, &mut r);
            TrainingInstance {
                masked_positions: vec![2],
                mlm_labels: vec![pair.ids[2]],
                pair,
                nsp_label: i,
            }
        })
        .collect()
}

#[test]
fn gradient_reaches_the_table() {
    let v = toy_vocab(30);
    let config = tiny_config(v.len(), 10).with_injection(true);
    let mut store = ParamStore::<f64>::new();
    let net = redbert_core::model::PretrainNet::new(&config, v.pad_id(), &mut store, &mut rng(1)).unwrap();
    let data = tiny_instance(&v);
    let refs: Vec<&TrainingInstance> = data.iter().collect();
    let mut g = Graph::new();
    let mut r = rng(0);
    let out = net
        .loss(&mut g, &store, &refs, Default::default(), &mut Ctx::eval(&mut r))
        .unwrap();
    g.backward(out.total, &mut store).unwrap();
    let table = net.backbone.deps.as_ref().unwrap().table;
    let grad = store.grad(table).unwrap();
    let used = data[0].pair.ids[1];
    assert!(grad.row(used).iter().any(|&x| x != 0.0));
}

#[test]
fn frozen_table_survives_training_bit_identical() {
    let v = toy_vocab(30);
    for finetune in [false, true] {
        let config = ModelConfig {
            finetune_deps: finetune,
            ..tiny_config(v.len(), 10).with_injection(true)
        };
        let mut model = Model::init(config, v.clone(), 2).unwrap();
        let id = model.net.backbone.deps.as_ref().unwrap().table;
        let before = model.store.value(id).clone();
        let cfg = TrainRunConfig {
            learning_rate: 1e-2,
            ..Default::default()
        };
        fit_batch(&mut model, &tiny_instance(&v), &cfg, 5, None).unwrap();
        let after = model.store.value(id);
        if finetune {
            assert_ne!(&before, after);
            assert!(after.row(v.pad_id()).iter().all(|&x| x == 0.0));
        } else {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before), bits(after));
        }
    }
}

#[test]
fn zero_side_output_gives_zero_leading_features() {
    let v = toy_vocab(30);
    let config = tiny_config(v.len(), 10).with_injection(true);
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::new(&config, v.pad_id(), &mut store, &mut rng(1)).unwrap();
    let norm = bb.deps.as_ref().unwrap().block.ff_norm;
    store.value_mut(norm.gamma).fill(0.0);
    store.value_mut(norm.beta).fill(0.0);
    let pair = random_pair(&v, 3, Some(2), 10, &mut rng(2));
    let batch = Batch::from_pairs([&pair]).unwrap();
    let mut g = Graph::new();
    let mut r = rng(0);
    let f = bb.forward(&mut g, &store, &batch, &mut Ctx::eval(&mut r)).unwrap();
    let c = g.value(f.output);
    let h = g.value(f.hidden);
    for p in 0..10 {
        assert!(c.row(p)[..8].iter().all(|&x| x == 0.0));
        assert_eq!(&c.row(p)[8..], h.row(p));
    }
}

#[test]
fn full_size_parameter_ordering() {
    let vocab_size = 30522;
    let count = |config: ModelConfig| {
        let mut store = ParamStore::<f32>::new();
        redbert_core::model::PretrainNet::new(&config, 0, &mut store, &mut rng(0)).unwrap();
        store.count_parameters() as f64
    };
    let plain2 = count(ModelConfig::full_size(vocab_size, 2));
    let ded2 = count(ModelConfig::full_size(vocab_size, 2).with_injection(true));
    let plain4 = count(ModelConfig::full_size(vocab_size, 4));
    assert!(plain2 < ded2 && ded2 < plain4, "{plain2} {ded2} {plain4}");
    for (n, reference) in [(plain2, 39.2e6), (ded2, 51.2e6), (plain4, 53.4e6)] {
        assert!((n - reference).abs() / reference < 0.05, "{n} vs {reference}");
    }
}

//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p redbert-cli --test acceptance -- 4 9`.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redbert_core::analyze::{contextual_vectors, euclidean, pca_project, token_distance};
use redbert_core::datapipe::{
    apply_masking, build_instances, build_vocab, dependency_vectors, generate_corpus, generate_task, make_nsp_pairs,
    MaskAction, Masker, MaskingConfig, TrainingInstance, IS_NEXT,
};
use redbert_core::encoder::{Ctx, ModelConfig};
use redbert_core::model::{Model, PretrainNet};
use redbert_core::objectives::{distill_loss, mean_entropy, JointWeights};
use redbert_core::tasks::TaskKind;
use redbert_core::tensor::{gradcheck, Graph, ParamStore, Tensor, TensorError, Var};
use redbert_core::tokenizer::{encode_ids, encode_pair, Vocab, SPECIAL_TOKENS};
use redbert_core::trainkit::{evaluate, fine_tune, fit_batch, pretrain, RunLog, TrainRunConfig};

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk(vocab: &Vocab, max_len: usize) -> ModelConfig {
    ModelConfig {
        max_len,
        max_position: max_len,
        ..ModelConfig::desk(vocab.len())
    }
}

fn finetune_config(seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        batch_size: 16,
        learning_rate: 1e-3,
        max_epochs: 20,
        patience: 5,
        seed,
        ..Default::default()
    }
}

// 1

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

fn op_error(
    seed: u64,
    shapes: &[&[usize]],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random_tensor(s, &mut r)).unwrap())
        .collect();
    gradcheck::max_grad_error(&mut store, |g, s| {
        let xs: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let y = f(g, &xs)?;
        gradcheck::probe(g, y, &mut rng(seed + 1000))
    })
    .unwrap()
}

fn toy_vocab(n: usize) -> Vocab {
    let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    t.extend((t.len()..n).map(|i| format!("w{i}")));
    Vocab::from_tokens(t).unwrap()
}

fn model_error(config: &ModelConfig) -> f64 {
    let v = toy_vocab(config.vocab_size);
    let mut store = ParamStore::<f64>::new();
    let net = PretrainNet::new(config, v.pad_id(), &mut store, &mut rng(3)).unwrap();
    let mut r = rng(21);
    let data: Vec<TrainingInstance> = [(2, 3), (3, 2)]
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let ids = |n: usize, r: &mut ChaCha8Rng| -> Vec<usize> {
                (0..n).map(|_| r.random_range(SPECIAL_TOKENS.len()..v.len())).collect()
            };
            let (a, b) = (ids(a, &mut r), ids(b, &mut r));
            let pair = encode_ids(&a, Some(&b), &v, config.max_len).unwrap();
            let mut inst = apply_masking(&pair, i % 2, &v, 30 + i as u64);
            if inst.masked_positions.is_empty() {
                inst.masked_positions = vec![1];
                inst.mlm_labels = vec![pair.ids[1]];
            }
            inst
        })
        .collect();
    let refs: Vec<&TrainingInstance> = data.iter().collect();
    gradcheck::max_grad_error(&mut store, |g, s| {
        let mut r = rng(0);
        net.loss(g, s, &refs, JointWeights::default(), &mut Ctx::eval(&mut r))
            .map(|o| o.total)
    })
    .unwrap()
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut ops: Vec<(&str, f64)> = vec![
        ("matmul", op_error(1, &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]))),
        ("matmul_nt", op_error(2, &[&[2, 3, 4], &[2, 2, 4]], |g, x| g.matmul_nt(x[0], x[1]))),
        ("broadcast matmul", op_error(3, &[&[1, 2, 3], &[2, 3, 2]], |g, x| g.matmul(x[0], x[1]))),
        ("add", op_error(4, &[&[2, 3, 2], &[3, 1]], |g, x| g.add(x[0], x[1]))),
        ("sub", op_error(5, &[&[2, 3], &[3]], |g, x| g.sub(x[0], x[1]))),
        ("mul", op_error(6, &[&[2, 3, 2], &[3, 1]], |g, x| g.mul(x[0], x[1]))),
        ("scale", op_error(7, &[&[3, 3]], |g, x| Ok(g.scale(x[0], -1.7)))),
        ("sum", op_error(8, &[&[3, 3]], |g, x| Ok(g.sum(x[0])))),
        ("mean", op_error(9, &[&[3, 3]], |g, x| g.mean(x[0]))),
        ("gelu", op_error(10, &[&[4, 4]], |g, x| {
            let y = g.scale(x[0], 3.0);
            Ok(g.gelu(y))
        })),
        ("layer_norm", op_error(11, &[&[3, 5], &[5], &[5]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-12))),
        ("gather_rows", op_error(12, &[&[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2]))),
        ("concat_last", op_error(13, &[&[4, 2], &[4, 3]], |g, x| g.concat_last(&[x[0], x[1]]))),
        ("reshape", op_error(14, &[&[4, 3]], |g, x| g.reshape(x[0], &[2, 6]))),
        ("permute", op_error(15, &[&[2, 3, 4]], |g, x| g.permute(x[0], &[2, 0, 1]))),
        ("dropout", op_error(16, &[&[4, 4]], |g, x| g.dropout(x[0], 0.3, &mut rng(99)))),
        ("nll", op_error(17, &[&[4, 5]], |g, x| {
            let lp = g.log_softmax(x[0], 1)?;
            g.nll(lp, &[0, 4, 2, 2])
        })),
        ("cross_entropy", op_error(18, &[&[4, 5]], |g, x| {
            let lp = g.log_softmax(x[0], 1)?;
            g.cross_entropy(lp, &[1, 3, 3, 0])
        })),
        ("masked softmax", op_error(19, &[&[2, 4]], |g, x| {
            let mask = g.constant(Tensor::from_f64(&[1, 4], &[0., 0., f64::NEG_INFINITY, 0.])?);
            let y = g.add(x[0], mask)?;
            g.softmax(y, 1)
        })),
    ];
    for axis in 0..3 {
        ops.push(("softmax", op_error(20 + axis as u64, &[&[2, 3, 2]], move |g, x| g.softmax(x[0], axis))));
        ops.push(("log_softmax", op_error(30 + axis as u64, &[&[2, 3, 2]], move |g, x| g.log_softmax(x[0], axis))));
    }
    let config = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ff_size: 32,
        max_len: 8,
        max_position: 8,
        dropout: 0.0,
        dep_dim: 8,
        dep_heads: 2,
        dep_ff_size: 16,
        ..ModelConfig::desk(50)
    };
    ops.push(("desk 2-layer model", model_error(&config)));
    ops.push(("desk 2-layer model with injection", model_error(&config.clone().with_injection(true))));
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = ops.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    ensure(
        worst < 1e-4 && secs < 120.0,
        format!("{} checks, worst {worst:.2e} ({worst_name}), {secs:.1}s", ops.len()),
    )
}

// 2

fn uniform_heads() -> Check {
    let g = redbert_core::datapipe::Grammar::builtin();
    let mut details = Vec::new();
    let mut ok = true;
    for vocab in [build_vocab(&g), toy_vocab(50)] {
        let corpus = generate_corpus(&g, 20, 0.2, 1).unwrap();
        let data = if vocab.len() == 50 {
            let mut r = rng(2);
            (0..16)
                .map(|i| {
                    let ids: Vec<usize> = (0..10).map(|_| r.random_range(SPECIAL_TOKENS.len()..50)).collect();
                    let pair = encode_ids(&ids[..5], Some(&ids[5..]), &vocab, 16).unwrap();
                    apply_masking(&pair, i % 2, &vocab, i as u64)
                })
                .collect()
        } else {
            build_instances(&corpus, &vocab, 32, MaskingConfig::default(), 1).unwrap()
        };
        let mut m = Model::init(desk(&vocab, 32), vocab.clone(), 4).unwrap();
        m.net.nsp.zero(&mut m.store);
        m.net.mlm.zero(&mut m.store);
        let refs: Vec<&TrainingInstance> = data.iter().take(32).collect();
        let mut graph = Graph::new();
        let mut r = rng(0);
        let out = m
            .net
            .loss(&mut graph, &m.store, &refs, JointWeights::default(), &mut Ctx::eval(&mut r))
            .unwrap();
        let nsp = graph.value(out.nsp.loss).item().unwrap() as f64;
        let mlm = graph.value(out.mlm.loss.unwrap().loss).item().unwrap() as f64;
        let ln_v = (vocab.len() as f64).ln();
        ok &= (nsp - std::f64::consts::LN_2).abs() < 1e-4 && (mlm - ln_v).abs() < 1e-4;
        details.push(format!(
            "V={}: NSP err {:.1e}, MLM err {:.1e}",
            vocab.len(),
            (nsp - std::f64::consts::LN_2).abs(),
            (mlm - ln_v).abs()
        ));
    }
    ensure(ok, details.join("; "))
}

// 3

fn data_statistics() -> Check {
    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let corpus = generate_corpus(&g, 4000, 0.2, 3).unwrap();
    let pairs = make_nsp_pairs(&corpus, 3).unwrap();
    let masker = Masker::new(&v, MaskingConfig::default());
    let mut r = rng(4);
    let (mut eligible, mut selected) = (0usize, [0usize; 3]);
    for p in pairs.iter().cycle() {
        if eligible >= 100_000 {
            break;
        }
        let pair = encode_pair(&p.a, Some(&p.b), &v, 128).unwrap();
        eligible += masker.maskable(&pair).len();
        let (_, actions) = masker.apply(&pair, p.label, &mut r);
        for a in actions {
            selected[match a {
                MaskAction::Mask => 0,
                MaskAction::Random => 1,
                MaskAction::Keep => 2,
            }] += 1;
        }
    }
    let total: usize = selected.iter().sum();
    let rate = total as f64 / eligible as f64;
    let shares: Vec<f64> = selected.iter().map(|&c| c as f64 / total as f64).collect();
    let positive = pairs.iter().filter(|p| p.label == IS_NEXT).count() as f64 / pairs.len() as f64;
    let ok = (0.14..=0.16).contains(&rate)
        && (shares[0] - 0.8).abs() <= 0.02
        && (shares[1] - 0.1).abs() <= 0.02
        && (shares[2] - 0.1).abs() <= 0.02
        && pairs.len() >= 10_000
        && (0.48..=0.52).contains(&positive);
    ensure(
        ok,
        format!(
            "{eligible} maskable, rate {rate:.4}, mask/random/keep {:.3}/{:.3}/{:.3}; {} pairs, IsNext {positive:.4}",
            shares[0],
            shares[1],
            shares[2],
            pairs.len()
        ),
    )
}

// 4

fn overfit_one_batch() -> Check {
    let start = Instant::now();
    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let corpus = generate_corpus(&g, 100, 0.2, 0).unwrap();
    let mut batch = build_instances(&corpus, &v, 64, MaskingConfig::default(), 0).unwrap();
    batch.truncate(32);
    let config = ModelConfig {
        dropout: 0.0,
        ..desk(&v, 64)
    };
    let mut m = Model::init(config, v, 0).unwrap();
    let run = TrainRunConfig {
        learning_rate: 1e-3,
        ..Default::default()
    };
    let losses = fit_batch(&mut m, &batch, &run, 2000, Some(0.1)).unwrap();
    let last = *losses.last().unwrap();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        batch.len() == 32 && last < 0.1 && secs < 600.0,
        format!("loss {:.3} -> {last:.4} in {} steps, {secs:.1}s", losses[0], losses.len()),
    )
}

// 5

fn separable_tasks() -> Check {
    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let mut ok = true;
    let mut details = Vec::new();
    for (kind, floor) in [(TaskKind::Intent, 1.0), (TaskKind::Ner, 0.99), (TaskKind::TitleCompression, 0.99)] {
        let train = generate_task(&g, kind, 1000, 1);
        let test = generate_task(&g, kind, 200, 2);
        let mut m = Model::init(desk(&v, 32), v.clone(), 0).unwrap();
        let run = TrainRunConfig {
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 3,
            ..Default::default()
        };
        let out = fine_tune(&mut m, &train, &run, &mut RunLog::discard()).unwrap();
        let f1 = evaluate(&m, &test, 64).unwrap().f1();
        ok &= f1 >= floor && out.epochs_run <= 20;
        details.push(format!("{kind} {f1:.4} ({} epochs)", out.epochs_run));
    }
    ensure(ok, details.join(", "))
}

// 6

fn pretraining_helps() -> Check {
    let start = Instant::now();
    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let config = desk(&v, 32);
    let (mut pretrained, mut random) = (0.0, 0.0);
    for seed in 0..5u64 {
        let corpus = generate_corpus(&g, 1000, 0.2, seed).unwrap();
        let instances = build_instances(&corpus, &v, 32, MaskingConfig::default(), seed).unwrap();
        let mut base = Model::init(config.clone(), v.clone(), seed).unwrap();
        let run = TrainRunConfig {
            learning_rate: 1e-3,
            max_epochs: 10,
            patience: 2,
            seed,
            ..Default::default()
        };
        pretrain(&mut base, &instances, &run, None, &mut RunLog::discard()).unwrap();
        for kind in TaskKind::ALL {
            let train = generate_task(&g, kind, 200, 10 + seed);
            let test = generate_task(&g, kind, 300, 20 + seed);
            let mut a = base.clone();
            fine_tune(&mut a, &train, &finetune_config(seed), &mut RunLog::discard()).unwrap();
            pretrained += evaluate(&a, &test, 64).unwrap().f1();
            let mut b = Model::init(config.clone(), v.clone(), seed).unwrap();
            fine_tune(&mut b, &train, &finetune_config(seed), &mut RunLog::discard()).unwrap();
            random += evaluate(&b, &test, 64).unwrap().f1();
        }
    }
    let (pretrained, random) = (pretrained / 25.0, random / 25.0);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        pretrained > random && secs < 3600.0,
        format!("mean F1 pretrained {pretrained:.4} vs random init {random:.4}, {secs:.1}s"),
    )
}

// 7

fn injection_helps() -> Check {
    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let plain_config = desk(&v, 32);
    let ded_config = ModelConfig {
        dep_dim: 64,
        dep_ff_size: 256,
        ..plain_config.clone().with_injection(true)
    };
    let vectors = dependency_vectors(&g, 64, 99);
    let (mut plain, mut ded) = (0.0, 0.0);
    for seed in 0..5u64 {
        for kind in [TaskKind::Ner, TaskKind::TitleCompression] {
            let train = generate_task(&g, kind, 150, 10 + seed);
            let test = generate_task(&g, kind, 300, 20 + seed);
            let mut p = Model::init(plain_config.clone(), v.clone(), seed).unwrap();
            fine_tune(&mut p, &train, &finetune_config(seed), &mut RunLog::discard()).unwrap();
            plain += evaluate(&p, &test, 64).unwrap().f1();
            let mut d = Model::init(ded_config.clone(), v.clone(), seed).unwrap();
            d.set_dep_vectors(&vectors, seed).unwrap();
            fine_tune(&mut d, &train, &finetune_config(seed), &mut RunLog::discard()).unwrap();
            ded += evaluate(&d, &test, 64).unwrap().f1();
        }
    }
    let (plain, ded) = (plain / 10.0, ded / 10.0);

    let count = |config: ModelConfig| {
        let mut store = ParamStore::<f32>::new();
        PretrainNet::new(&config, 0, &mut store, &mut rng(0)).unwrap();
        store.count_parameters() as f64
    };
    let counts = [
        count(ModelConfig::full_size(30522, 2)),
        count(ModelConfig::full_size(30522, 2).with_injection(true)),
        count(ModelConfig::full_size(30522, 4)),
    ];
    let within = counts
        .iter()
        .zip([39.2e6, 51.2e6, 53.4e6])
        .all(|(n, r)| (n - r).abs() / r < 0.05);
    ensure(
        ded >= plain && counts[0] < counts[1] && counts[1] < counts[2] && within,
        format!(
            "NER/title mean F1 injected {ded:.4} vs plain {plain:.4}; full-size counts {:.2}M < {:.2}M < {:.2}M",
            counts[0] / 1e6,
            counts[1] / 1e6,
            counts[2] / 1e6
        ),
    )
}

// 8

fn distill(student: &[f64], teacher: &[f64]) -> f64 {
    let k = teacher.len();
    let mut g = Graph::new();
    let s = g.constant(Tensor::from_f64(&[1, k], student).unwrap());
    let loss = distill_loss(&mut g, s, &Tensor::from_f64(&[1, k], teacher).unwrap(), 1.0).unwrap();
    g.value(loss).item().unwrap()
}

fn distillation_identities() -> Check {
    let mut r = rng(8);
    let (mut hard_err, mut below, mut min_err, mut beaten) = (0f64, 0f64, 0f64, 0usize);
    for _ in 0..500 {
        let k = r.random_range(2..12);
        let s: Vec<f64> = (0..k).map(|_| r.random_range(-6.0..6.0)).collect();
        let m = s.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let c = r.random_range(0..k);
        let mut one_hot = vec![0.0; k];
        one_hot[c] = 1.0;
        hard_err = hard_err.max((distill(&s, &one_hot) - (lse - s[c])).abs());

        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let t: Vec<f64> = raw.iter().map(|x| x / sum).collect();
        let entropy = mean_entropy(&Tensor::<f64>::from_f64(&[1, k], &t).unwrap());
        let d = distill(&s, &t);
        below = below.max(entropy - d);
        let at_t: Vec<f64> = t.iter().map(|p| p.ln()).collect();
        let d_min = distill(&at_t, &t);
        min_err = min_err.max((d_min - entropy).abs());
        for _ in 0..4 {
            let nudged: Vec<f64> = at_t.iter().map(|x| x + r.random_range(-0.1..0.1)).collect();
            if distill(&nudged, &t) < d_min - 1e-12 {
                beaten += 1;
            }
        }
        if d < d_min - 1e-12 {
            beaten += 1;
        }
    }
    ensure(
        hard_err < 1e-9 && below <= 1e-6 && min_err < 1e-6 && beaten == 0,
        format!(
            "500 cases: one-hot err {hard_err:.1e}, worst deficit below entropy {below:.1e}, minimum err {min_err:.1e}, beaten {beaten}"
        ),
    )
}

// 9

fn pca_and_distances() -> Check {
    let mut r = rng(9);
    let (n, d) = (50, 16);
    let data: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|j| r.random_range(-1.0..1.0) * (d - j) as f64).collect())
        .collect();
    let (coords, pca) = pca_project(&data, d).unwrap();

    let m = DMatrix::from_fn(n, d, |i, j| data[i][j]);
    let mean: Vec<f64> = (0..d).map(|j| m.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().sum();
    let mut worst = 0f64;
    for (j, &o) in order.iter().enumerate() {
        let value = eig.eigenvalues[o];
        worst = worst.max((pca.explained_variance[j] - value).abs());
        worst = worst.max((pca.explained_variance_ratio[j] - value / total).abs());
        let axis = eig.eigenvectors.column(o);
        let sign = pca.components[j].iter().zip(axis.iter()).map(|(a, b)| a * b).sum::<f64>().signum();
        for i in 0..n {
            let expected: f64 = sign * (0..d).map(|k| centered[(i, k)] * axis[k]).sum::<f64>();
            worst = worst.max((coords[i][j] - expected).abs());
        }
    }

    let g = redbert_core::datapipe::Grammar::builtin();
    let v = build_vocab(&g);
    let model = Model::init(desk(&v, 32), v, 9).unwrap();
    let sentence = "add the red running shoes to my cart";
    let ctx = contextual_vectors(&model, sentence).unwrap();
    let dist = ctx.distances();
    let mut axioms = true;
    for i in 0..dist.len() {
        axioms &= dist[i][i] == 0.0;
        for j in 0..dist.len() {
            axioms &= dist[i][j] == dist[j][i] && dist[i][j] >= 0.0;
            axioms &= dist[i][j] == euclidean(&ctx.vectors[i], &ctx.vectors[j]);
            axioms &= i == j || dist[i][j] > 0.0;
            for k in 0..dist.len() {
                axioms &= dist[i][k] <= dist[i][j] + dist[j][k];
            }
        }
    }
    axioms &= token_distance(&model, sentence, "red", "cart").unwrap()
        == token_distance(&model, sentence, "cart", "red").unwrap();
    axioms &= token_distance(&model, sentence, "shoes", "shoes").unwrap() == 0.0;
    ensure(
        worst < 1e-8 && axioms,
        format!(
            "PCA worst deviation {worst:.1e} on {n}x{d}; distance axioms {} over {} tokens",
            if axioms { "hold" } else { "violated" },
            dist.len()
        ),
    )
}

// 10

fn cli(args: &[&str]) -> i32 {
    redbert_cli::run(std::iter::once("redbert").chain(args.iter().copied()))
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let r = root.to_str().unwrap();
    let data = root.join("data");
    let path = |p: &str| data.join(p).to_str().unwrap().to_string();
    let tiny = [
        "--layers", "1", "--hidden", "32", "--heads", "2", "--ff", "64", "--max-len", "32", "--max-epochs", "2",
        "--lr", "1e-3", "--batch-size", "16", "--seed", "7",
    ];
    let mut runs = vec![
        vec![
            "gen-corpus", "--out-root", r, "--run-name", "data", "--num-docs", "80", "--examples-per-task", "60",
            "--test-examples", "30", "--dep-dim", "16", "--seed", "7",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>(),
        ["pretrain", "--out-root", r, "--run-name", "pre", "--corpus"]
            .into_iter()
            .map(String::from)
            .chain([path("corpus_train.jsonl"), "--vocab".into(), path("vocab.txt")])
            .chain(tiny.iter().map(|s| s.to_string()))
            .collect(),
    ];
    runs.push(
        ["finetune", "--out-root", r, "--run-name", "ner", "--task", "ner", "--data"]
            .into_iter()
            .map(String::from)
            .chain([path("tasks/train/ner.jsonl"), "--test".into(), path("tasks/test/ner.jsonl")])
            .chain(["--checkpoint".into(), root.join("pre/model.bin").to_str().unwrap().to_string()])
            .chain(tiny.iter().map(|s| s.to_string()))
            .collect(),
    );
    let mut out = Vec::new();
    for args in &runs {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_eq!(cli(&refs), 0, "{refs:?}");
    }
    let replay = root.join("ner/config.txt");
    assert_eq!(cli(&["finetune", "--config", replay.to_str().unwrap(), "--run-name", "ner-replay"]), 0);
    for run in ["data", "pre", "ner", "ner-replay"] {
        out.push((run.to_string(), std::fs::read(root.join(run).join("metrics.csv")).unwrap()));
    }
    out
}

fn reproducible_runs() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let replay_matches = first[2].1 == first[3].1;
    let bytes: usize = first.iter().map(|(_, b)| b.len()).sum();
    ensure(
        differing.is_empty() && replay_matches,
        format!(
            "{} metrics files ({bytes} bytes) compared across two runs; differing {differing:?}; config replay {}",
            first.len(),
            if replay_matches { "identical" } else { "differs" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradients match finite differences", gradients),
        ("zeroed heads give uniform losses", uniform_heads),
        ("masking and NSP statistics", data_statistics),
        ("one batch can be overfit", overfit_one_batch),
        ("separable tasks are learned", separable_tasks),
        ("pretraining beats random init", pretraining_helps),
        ("dependency injection helps tagging", injection_helps),
        ("distillation identities", distillation_identities),
        ("PCA and token distances", pca_and_distances),
        ("identical runs are bit-identical", reproducible_runs),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (verdict, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {verdict} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

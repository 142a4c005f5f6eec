use rand::seq::SliceRandom;
use rand::Rng;
use specfed_core::bank::KnowledgeBank;
use specfed_core::checkpoint;
use specfed_core::federation::*;
use specfed_core::fusion::{FusionConfig, Prompted};
use specfed_core::image::Image;
use specfed_core::models::TaskKind;
use specfed_core::rng::{stream, Stream};
use specfed_core::synthdata::{generate_dataset, Dataset, ModalityMode, Sample};
use specfed_core::{sgd_step, Tape, Tensor};

fn tiny(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.height = 16;
    c.data.width = 16;
    c.data.num_samples = 48;
    c.model.backbone.patch_size = 8;
    c.model.backbone.dim = 8;
    c.model.backbone.depth = 1;
    c.model.tokenizer.hidden = 8;
    c.federation.num_clients = 3;
    c.federation.rounds = 3;
    c.federation.batch_size = 5;
    c.federation.seed = seed;
    c.federation.partition = PartitionConfig::Modality { mode: ModalityMode::Disjoint };
    c
}

fn fedavg_config(seed: u64) -> ExperimentConfig {
    let mut c = tiny(seed);
    c.model.fusion = FusionConfig::identity();
    c.federation.lambda = 0.0;
    c
}

/// Plain FedAvg written against the backbone and head only.
fn reference_fedavg(fed: &Federation, ds: &Dataset, rounds: usize) -> (Vec<Tensor>, Vec<Vec<Tensor>>) {
    let cfg = &fed.config.federation;
    let mut global = fed.shared.backbone.clone();
    let mut heads: Vec<_> = fed.clients.iter().map(|c| c.head.clone()).collect();
    for round in 0..rounds {
        let mut locals = Vec::new();
        for (k, client) in fed.clients.iter().enumerate() {
            let mut bb = global.clone();
            let head = &mut heads[k];
            let mut rng = stream(cfg.seed, Stream::LocalShuffle, round as u64, k as u64);
            let mut order: Vec<usize> = (0..client.shard.len()).collect();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let mut tape = Tape::new();
                    let bvars = bb.bind(&mut tape);
                    let hvars = head.bind(&mut tape);
                    let mut total = None;
                    for &j in chunk {
                        let sample = &ds.samples[client.shard[j]];
                        let patches = bb.patchify(&sample.image).unwrap().with_requires_grad(false);
                        let p = tape.param(&patches);
                        let r = bb.forward(&mut tape, &bvars, p).unwrap();
                        let seq = Prompted { tokens: r, prefix_len: 0, body_len: bb.num_tokens(), suffix_len: 0 };
                        let pred = head.forward(&mut tape, &hvars, &seq).unwrap();
                        let l = head.loss(&mut tape, pred, sample).unwrap();
                        total = Some(match total {
                            Some(t) => tape.add(t, l).unwrap(),
                            None => l,
                        });
                    }
                    let loss = tape.scale(total.unwrap(), 1.0 / chunk.len() as f64);
                    tape.backward(loss).unwrap();
                    tape.accumulate_all(&bvars, bb.tensors_mut()).unwrap();
                    tape.accumulate_all(&hvars.ids(), head.tensors_mut()).unwrap();
                    sgd_step(bb.tensors_mut().into_iter().chain(head.tensors_mut()), cfg.lr).unwrap();
                }
            }
            locals.push((bb, client.shard.len() as f64));
        }
        let total: f64 = locals.iter().map(|(_, n)| n).sum();
        let mut next = global.clone();
        for (ti, dst) in next.tensors_mut().into_iter().enumerate() {
            let data: Vec<f64> = (0..dst.numel())
                .map(|e| {
                    let mut acc = 0.0;
                    for (bb, n) in &locals {
                        acc += (n / total) * bb.tensors()[ti].data()[e];
                    }
                    acc
                })
                .collect();
            dst.data_mut().copy_from_slice(&data);
        }
        global = next;
    }
    let heads = heads.iter().map(|h| h.tensors().into_iter().cloned().collect()).collect();
    (global.tensors().into_iter().cloned().collect(), heads)
}

#[test]
fn fedavg_degeneration_is_exact() {
    for seed in [1, 2, 3] {
        let cfg = fedavg_config(seed);
        let ds = generate_dataset(&cfg.data, seed).unwrap();
        let fed = Federation::new(&cfg, &ds).unwrap();
        let (expected_bb, expected_heads) = reference_fedavg(&fed, &ds, cfg.federation.rounds);
        let result = run_on_dataset(&cfg, &ds, 2).unwrap();
        let got: Vec<Tensor> = result.federation.shared.backbone.tensors().into_iter().cloned().collect();
        for (a, b) in got.iter().zip(&expected_bb) {
            assert_eq!(a.data(), b.data(), "seed {seed}");
        }
        for (c, h) in result.federation.clients.iter().zip(&expected_heads) {
            assert_eq!(c.head.weight.data(), h[0].data());
        }
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = tiny(5);
    let ds = generate_dataset(&cfg.data, 5).unwrap();
    let a = run_on_dataset(&cfg, &ds, 1).unwrap();
    let b = run_on_dataset(&cfg, &ds, 4).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.federation, b.federation);
}

#[test]
fn round_zero_seeds_the_bank_with_one_token_per_client() {
    let cfg = tiny(6);
    let ds = generate_dataset(&cfg.data, 6).unwrap();
    let mut fed = Federation::new(&cfg, &ds).unwrap();
    let prepared = prepare(&ds, &fed.shared).unwrap();
    let report = fed.run_round(&prepared, 1).unwrap();
    assert_eq!(report.bank_size, 3);
    assert_eq!(report.participants, vec![0, 1, 2]);
    let clients: Vec<Option<usize>> = fed.bank.prototypes().iter().map(|p| p.source_client).collect();
    assert_eq!(clients, vec![Some(0), Some(1), Some(2)]);
    for p in fed.bank.prototypes() {
        let n: f64 = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    // every participant reports every metric
    assert_eq!(report.records.len(), 3 * 3);
}

#[test]
fn single_client_global_equals_local() {
    let mut cfg = tiny(7);
    cfg.federation.num_clients = 1;
    cfg.federation.partition = PartitionConfig::Dirichlet { gamma: 0.5 };
    let ds = generate_dataset(&cfg.data, 7).unwrap();
    let mut fed = Federation::new(&cfg, &ds).unwrap();
    let prepared = prepare(&ds, &fed.shared).unwrap();
    fed.run_round(&prepared, 1).unwrap();
    assert_eq!(fed.shared, fed.clients[0].shared);
}

#[test]
fn partial_participation_samples_clients() {
    let mut cfg = tiny(8);
    cfg.federation.participation_ratio = 0.5;
    cfg.federation.num_clients = 4;
    cfg.data.num_modalities = 4;
    let ds = generate_dataset(&cfg.data, 8).unwrap();
    let r = run_on_dataset(&cfg, &ds, 1).unwrap();
    for rep in &r.reports {
        assert_eq!(rep.participants.len(), 2);
        let ids: std::collections::BTreeSet<usize> = rep.records.iter().map(|m| m.client_id).collect();
        assert_eq!(ids.into_iter().collect::<Vec<_>>(), rep.participants);
    }
}

fn separable_shard() -> Vec<Sample> {
    let mut rng = stream(3, Stream::Sample, 0, 0);
    (0..12)
        .map(|i| {
            let class = i % 2;
            let level = if class == 0 { 0.2 } else { 0.8 };
            let px: Vec<f64> = (0..64).map(|_| level + rng.gen_range(-0.05..0.05)).collect();
            Sample {
                image: Image::gray(8, 8, px).unwrap(),
                class_id: class,
                modality: 0,
                mask: vec![0; 64],
                hr: Image::filled(16, 16, 1, level),
            }
        })
        .collect()
}

#[test]
fn local_training_converges_on_separable_data() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.data.num_classes = 2;
    cfg.model.head.num_classes = 2;
    cfg.model.backbone.dim = 8;
    cfg.model.backbone.depth = 1;
    cfg.model.tokenizer.hidden = 8;
    cfg.federation.lambda = 0.0;
    cfg.federation.num_clients = 1;
    cfg.federation.partition = PartitionConfig::Dirichlet { gamma: 1.0 };
    let samples = separable_shard();
    let ds = Dataset { height: 8, width: 8, hr_scale: 2, num_classes: 2, num_modalities: 1, samples };
    let mut fed = Federation::new(&cfg, &ds).unwrap();
    let prepared = prepare(&ds, &fed.shared).unwrap();
    let bank = KnowledgeBank::new(cfg.federation.bank.clone()).unwrap();
    let local = LocalConfig::from_federation(&cfg.federation, 0);
    let batch: Vec<&Prepared> = prepared.iter().collect();
    let client = &mut fed.clients[0];
    let mut log = specfed_core::bank::RetrievalLog::new(0);
    let mut losses = Vec::new();
    for _ in 0..20 {
        losses.push(train_batch(client, &batch, &bank, &local, &mut log).unwrap().0);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "loss went {} -> {}", w[0], w[1]);
    }
}

#[test]
fn local_update_contract() {
    let cfg = tiny(9);
    let ds = generate_dataset(&cfg.data, 9).unwrap();
    let mut fed = Federation::new(&cfg, &ds).unwrap();
    let prepared = prepare(&ds, &fed.shared).unwrap();
    let mut local = LocalConfig::from_federation(&cfg.federation, 0);
    let global = fed.shared.clone();
    let client = &mut fed.clients[0];
    let train: Vec<&Prepared> = client.shard.iter().map(|&i| &prepared[i]).collect();
    let update = local_update(client, &global, &train, &[], &fed.bank, &local).unwrap();
    let norm: f64 = update.token.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert_eq!(update.n_k, train.len());
    local.epochs = 0;
    assert!(matches!(local_update(client, &global, &train, &[], &fed.bank, &local), Err(FederationError::Config(_))));
    assert!(matches!(local_update(client, &global, &[], &[], &fed.bank, &local), Err(FederationError::Config(_))));
}

#[test]
fn same_orchestration_runs_every_task() {
    for kind in [TaskKind::Classification, TaskKind::Segmentation, TaskKind::SuperResolution] {
        let mut cfg = tiny(10);
        cfg.model.head.kind = kind;
        cfg.federation.rounds = 1;
        let r = run_experiment(&cfg, 1).unwrap();
        let names: Vec<&str> = r.reports[0].records.iter().map(|m| m.metric.as_str()).take(3).collect();
        assert_eq!(r.reports[0].records[0].task, kind.name());
        assert_eq!(names.len(), 3, "{kind:?}");
    }
}

#[test]
fn federation_module_has_no_task_branches() {
    let src = include_str!("../src/federation.rs");
    let idents: std::collections::BTreeSet<&str> = src
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .collect();
    for word in ["TaskKind", "Classification", "Segmentation", "SuperResolution", "class_id", "mask", "hr"] {
        assert!(!idents.contains(word), "federation.rs mentions {word}");
    }
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let cfg = tiny(11);
    let ds = generate_dataset(&cfg.data, 11).unwrap();
    let full = run_on_dataset(&cfg, &ds, 1).unwrap();

    let mut fed = Federation::new(&cfg, &ds).unwrap();
    let prepared = prepare(&ds, &fed.shared).unwrap();
    fed.run_round(&prepared, 1).unwrap();
    let mut buf = Vec::new();
    checkpoint::save_federation(&mut buf, &fed).unwrap();
    let mut resumed = checkpoint::load_federation(&buf[..], &cfg).unwrap();
    assert_eq!(resumed, fed);
    let mut reports = Vec::new();
    while resumed.round < cfg.federation.rounds {
        reports.push(resumed.run_round(&prepared, 1).unwrap());
    }
    assert_eq!(reports[..], full.reports[1..]);
    assert_eq!(resumed, full.federation);

    let mut other = cfg.clone();
    other.federation.lr = 0.01;
    assert!(checkpoint::load_federation(&buf[..], &other).is_err());

    let snap = checkpoint::ModelSnapshot::of(&resumed);
    let mut buf = Vec::new();
    checkpoint::save_model(&mut buf, &snap).unwrap();
    assert_eq!(checkpoint::load_model(&buf[..]).unwrap(), snap);
}

//! Scratch sizing probe; not part of the artifact surface.

use std::collections::BTreeSet;

use vermouth::backbone::{pretrain_backbone, PretrainConfig};
use vermouth::data::{gen_sketch_photo_set, Domain};
use vermouth::harness::{apply_flat_key, dataset_spec, run_task, RunConfig};
use vermouth::rng::derive_seed;
use vermouth::tasks::{eval_retrieval, init_pipeline_store, RetrievalFeature, TaskKind};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::preset(TaskKind::Retrieve);
    let mut seed = 0u64;
    let mut pre_epochs = 0usize;
    let mut pre_lr = 2e-3;
    for kv in &args {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k {
            "probe.seed" => seed = v.parse().unwrap(),
            "pre.epochs" => pre_epochs = v.parse().unwrap(),
            "pre.lr" => pre_lr = v.parse().unwrap(),
            _ => apply_flat_key(&mut cfg, k, v).unwrap(),
        }
    }

    let pipe = cfg.pipeline(seed).unwrap();
    let spec = dataset_spec(&cfg, seed).unwrap();
    let set = gen_sketch_photo_set::<f64>(&spec).unwrap();

    let init = if pre_epochs > 0 {
        let mut store = init_pipeline_store::<f64>(derive_seed(seed, "init", 0), &pipe).unwrap();
        let samples: Vec<_> = set
            .train
            .samples
            .iter()
            .map(|s| (s.image.clone(), s.caption.clone()))
            .collect();
        let tc = PretrainConfig {
            epochs: pre_epochs,
            lr: pre_lr,
            seed: derive_seed(seed, "pretrain", 0),
            cond_dropout: 0.1,
        };
        let t0 = std::time::Instant::now();
        let rep =
            pretrain_backbone(&mut store, &samples, &pipe.backbone, &pipe.text, &pipe.table, &tc)
                .unwrap();
        println!(
            "pretrain {} epochs in {:.0}s, loss {:.4} -> {:.4}",
            pre_epochs,
            t0.elapsed().as_secs_f64(),
            rep.loss_curve.first().unwrap(),
            rep.loss_curve.last().unwrap()
        );
        Some(store)
    } else {
        None
    };

    let t0 = std::time::Instant::now();
    let out = run_task::<f64>(&cfg, seed, init, true).unwrap();
    println!(
        "run_task map (projected-v) = {:.4}  [{:.0}s]",
        out.value,
        t0.elapsed().as_secs_f64()
    );

    // In-domain diagnostic: train sketches as queries against train photos.
    let train_labels: Vec<usize> = set
        .train
        .samples
        .iter()
        .map(|s| s.label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let tq: Vec<_> = set
        .train
        .samples
        .iter()
        .filter(|s| s.domain == Domain::Sketch)
        .cloned()
        .collect();
    let tg: Vec<_> = set
        .train
        .samples
        .iter()
        .filter(|s| s.domain == Domain::Photo)
        .cloned()
        .collect();
    let rep = eval_retrieval(
        &pipe,
        &out.store,
        &out.class_names,
        &tq,
        &tg,
        RetrievalFeature::ProjectedV,
        None,
        None,
    )
    .unwrap();
    let _ = train_labels;
    println!("train-split sketch->photo map = {:.4}", rep.map);
}

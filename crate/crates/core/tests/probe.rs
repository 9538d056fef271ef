// Temporary training-dynamics probe; removed before final delivery.
use bido_core::config::TrainConfig;
use bido_core::corpus::{generate_corpus_in_memory, CorpusParams};
use bido_core::train::{evaluate, train};

#[test]
#[ignore]
fn probe_training_dynamics() {
    let n: usize = std::env::var("PROBE_N").map(|v| v.parse().unwrap()).unwrap_or(200);
    let samples: Vec<_> = generate_corpus_in_memory(&CorpusParams::desk_default(n, 7))
        .unwrap()
        .iter()
        .map(|g| g.to_loaded())
        .collect();
    let cfg = TrainConfig {
        seed: 1,
        epochs: std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(10),
        ..TrainConfig::default()
    };
    {
        let model = bido_core::train::BidoModel::init(&cfg).unwrap();
        for s in samples.iter().take(3) {
            let e = model.embeddings(s).unwrap();
            let norm = |v: &Option<Vec<f64>>| {
                v.as_ref().map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            };
            println!(
                "norms at init: xml {:.4} dex {:.6} fused {:.4}",
                norm(&e.z_xml), norm(&e.z_dex), norm(&e.fused)
            );
        }
    }
    let t0 = std::time::Instant::now();
    let outcome = train(&samples, &cfg).unwrap();
    println!("trained {} epochs in {:.1}s", cfg.epochs, t0.elapsed().as_secs_f64());
    for r in &outcome.history {
        println!(
            "epoch {:2} lr {:.6} loss {:.4} (xml {:.4} dex {:.4} ops {:.4} con {:.4}) val_f1 {:?}",
            r.epoch, r.lr, r.loss, r.loss_xml, r.loss_dex, r.loss_ops, r.loss_con, r.val.f1
        );
    }
    let test_refs: Vec<_> = outcome.split.test.iter().map(|&i| &samples[i]).collect();
    println!("test: {:?}", evaluate(&outcome.model, &test_refs).unwrap());
}

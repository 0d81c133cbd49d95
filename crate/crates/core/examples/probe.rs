// Scratch probe for fixture calibration. Not part of the test suite.

use empath_core::corpus::{self, EncodedExample};
use empath_core::knowledge::{attach, AttachPolicy, Relation};
use empath_core::model::{ForwardOptions, KnowledgePath, ModelConfig, ModelParams};
use empath_core::train::{dataset_metrics, train, TrainConfig};

fn encode_all(
    examples: &[corpus::DialogueExample],
    vocab: &corpus::Vocabulary,
) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| corpus::encode_example(e, vocab, 64, 24).unwrap())
        .collect()
}

fn main() {
    let t0 = std::time::Instant::now();
    for seed in [0u64, 1, 2] {
        let (mut examples, store) = corpus::synth_corpus(seed, 32, 4).unwrap();
        attach(&store, &mut examples, AttachPolicy::Strict).unwrap();
        let vocab = corpus::build_vocab(&examples, 1).unwrap();
        let encoded = encode_all(&examples, &vocab);
        let mut config = ModelConfig::toy(32, 2, vocab.size(), vocab.num_emotions());
        config.max_src = 64;
        config.max_tgt = 24;
        let params = ModelParams::init(config, seed).unwrap();
        let tcfg = TrainConfig {
            lr: 2e-3,
            batch_size: 16,
            epochs: 250,
            max_steps: Some(500),
            shuffle: true,
            seed,
            ..TrainConfig::default()
        };
        let mut first_under: Option<usize> = None;
        let result = train(params, &encoded, &[], &tcfg, |log| {
            if log.l_nll < 0.1 && first_under.is_none() {
                first_under = Some(log.step);
            }
            if log.step % 100 == 0 {
                eprintln!(
                    "seed {seed} step {:4} L={:.4} nll={:.4} emo={:.4}",
                    log.step, log.loss, log.l_nll, log.l_emo
                );
            }
        })
        .unwrap();
        let metrics = dataset_metrics(&result.params, &encoded, &ForwardOptions::default()).unwrap();
        // Winner frequency on the training corpus.
        let mut react_wins = 0usize;
        for ex in &encoded {
            let out = result.params.run_forward(ex, &ForwardOptions::default()).unwrap();
            if out.outcome.unwrap().winner == Relation::XReact {
                react_wins += 1;
            }
        }
        println!(
            "seed {seed}: steps={} nll={:.4} acc={:.3} first_nll<0.1 at {:?} xReact wins {}/{} [{:.1?}]",
            result.steps.len(),
            metrics.l_nll,
            metrics.emo_accuracy,
            first_under,
            react_wins,
            encoded.len(),
            t0.elapsed()
        );
    }

    // Ablation probe: full vs selector-off on a train/test split.
    println!("--- ablation probe ---");
    for seed in [0u64, 1, 2, 3, 4] {
        let (mut examples, store) = corpus::synth_corpus(1000 + seed, 48, 4).unwrap();
        attach(&store, &mut examples, AttachPolicy::Strict).unwrap();
        let (train_set, _, test_set) = corpus::split(&examples, (0.8, 0.1, 0.1), seed).unwrap();
        let vocab = corpus::build_vocab(&train_set, 1).unwrap();
        let train_enc = encode_all(&train_set, &vocab);
        let test_enc = encode_all(&test_set, &vocab);
        let mut config = ModelConfig::toy(32, 2, vocab.size(), vocab.num_emotions());
        config.max_src = 64;
        config.max_tgt = 24;

        let mut accs = Vec::new();
        for knowledge in [KnowledgePath::Adaptive, KnowledgePath::AllRelations] {
            let params = ModelParams::init(config.clone(), seed).unwrap();
            let tcfg = TrainConfig {
                lr: 2e-3,
                batch_size: 16,
                epochs: 200,
                max_steps: Some(400),
                shuffle: true,
                seed,
                options: ForwardOptions { knowledge: knowledge.clone(), ..Default::default() },
                ..TrainConfig::default()
            };
            let result = train(params, &train_enc, &[], &tcfg, |_| {}).unwrap();
            let opts = ForwardOptions { knowledge, ..Default::default() };
            let m = dataset_metrics(&result.params, &test_enc, &opts).unwrap();
            accs.push(m.emo_accuracy);
        }
        println!(
            "seed {seed}: full acc={:.3} ablated acc={:.3} direction={} [{:.1?}]",
            accs[0],
            accs[1],
            accs[0] > accs[1],
            t0.elapsed()
        );
    }
}

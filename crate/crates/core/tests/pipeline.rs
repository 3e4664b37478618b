use mope::config::RunConfig;
use mope::data::{Dataset, Instance, LabelMode};
use mope::encoder::{EncoderConfig, InitScheme, InputKind};
use mope::experiment;
use mope::fusion::{CompKind, CompTuning, FusionConfig, FusionMode, FusionModel};
use mope::optim::AdamW;
use mope::prompts::{PromptConfig, PromptKind, RoutingMode};
use mope::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encoder(input: InputKind, d: usize, layers: usize, seq: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_dim: d,
        num_heads: 4,
        ffn_dim: 2 * d,
        input,
        max_seq_len: seq,
        seed: 9,
        init_std: 0.02,
        init_scheme: InitScheme::FanIn,
    }
}

fn worked_example(k: usize, enabled: Vec<PromptKind>) -> FusionConfig {
    FusionConfig {
        main: encoder(InputKind::Tokens { vocab_size: 32 }, 32, 4, 8),
        comp: encoder(InputKind::Features { feature_dim: 4 }, 32, 2, 4),
        comp_kind: CompKind::Transformer,
        comp_tuning: CompTuning::Frozen,
        comp_prompt_len: 0,
        comp_input_dim: 16,
        prompt: PromptConfig {
            prompt_len: 6,
            num_experts: k,
            temperature: 0.1,
            noise_std: 0.1,
            routing: RoutingMode::Dense,
            enabled,
            comp_dim: 32,
            mapper_hidden: 32,
            share_mapper: false,
            init_std: 0.02,
        },
        mode: FusionMode::Fused,
        label_mode: LabelMode::Single,
        num_outputs: 4,
        seed: 1,
    }
}

fn small_run() -> RunConfig {
    RunConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        comp_hidden_dim: 16,
        num_experts: 4,
        train_size: 64,
        val_size: 16,
        test_size: 32,
        epochs: 1,
        batch_size: 16,
        ..RunConfig::default()
    }
}

#[test]
fn count_matches_worked_example() {
    let model = FusionModel::<f32>::new(&worked_example(4, PromptKind::ALL.to_vec())).unwrap();
    // Per layer: static 6*32, experts 4*6*32, router 32*4+4, mapper 32*32+32+32*32+32.
    let per_layer = 192 + 768 + 132 + 2112;
    assert_eq!(per_layer, 3204);
    assert_eq!(model.count_params().trainable, 4 * per_layer + 132);
    assert_eq!(model.count_params().trainable, 12948);
}

#[test]
fn single_expert_dynamic_only_costs_one_prompt_per_layer() {
    let model = FusionModel::<f32>::new(&worked_example(1, vec![PromptKind::Dynamic])).unwrap();
    let experts: usize = model
        .layers()
        .iter()
        .map(|m| model.store().value(m.experts.unwrap()).numel())
        .sum();
    assert_eq!(experts, 4 * 6 * 32);
    let static_or_mapper = model.layers().iter().any(|m| m.static_prompt.is_some() || m.mapper.is_some());
    assert!(!static_or_mapper);
}

#[test]
fn frozen_count_is_invariant_across_prompt_configs() {
    let frozen: Vec<usize> = experiment::prompt_subsets()
        .into_iter()
        .map(|kinds| FusionModel::<f32>::new(&worked_example(4, kinds)).unwrap().count_params().frozen)
        .collect();
    assert!(frozen.windows(2).all(|w| w[0] == w[1]), "{frozen:?}");
}

#[test]
fn trainable_set_excludes_encoder_bodies() {
    for tuning in [CompTuning::Frozen, CompTuning::Prompted] {
        let cfg = FusionConfig {
            comp_tuning: tuning,
            comp_prompt_len: 2,
            ..worked_example(4, PromptKind::ALL.to_vec())
        };
        let model = FusionModel::<f32>::new(&cfg).unwrap();
        for (_, p) in model.store().iter() {
            let body = p.name.starts_with("main.") || p.name.starts_with("comp.");
            assert_eq!(body, p.frozen, "{}", p.name);
        }
        assert_eq!(model.layers().len(), cfg.main.num_layers);
    }
    let cfg = FusionConfig {
        comp_tuning: CompTuning::Finetune,
        ..worked_example(4, PromptKind::ALL.to_vec())
    };
    let model = FusionModel::<f32>::new(&cfg).unwrap();
    assert!(model
        .store()
        .iter()
        .filter(|(_, p)| p.name.starts_with("comp."))
        .all(|(_, p)| !p.frozen));
}

#[test]
fn mismatched_complementary_width_is_a_config_error() {
    let mut cfg = worked_example(4, PromptKind::ALL.to_vec());
    cfg.prompt.comp_dim = 24;
    assert!(matches!(FusionModel::<f32>::new(&cfg), Err(Error::Config(_))));
    let cfg = worked_example(4, PromptKind::ALL.to_vec());
    let model = FusionModel::<f32>::new(&cfg).unwrap();
    let data = Dataset::generate(&small_run().task().unwrap()).unwrap();
    let mut inst = data.train[0].clone();
    inst.comp.push(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(model.forward(&[&inst], false, &mut rng), Err(Error::Config(_))));
}

fn data() -> Dataset {
    Dataset::generate(&small_run().task().unwrap()).unwrap()
}

fn model(run: &RunConfig) -> FusionModel<f64> {
    FusionModel::new(&run.fusion().unwrap()).unwrap()
}

fn logits(m: &FusionModel<f64>, batch: &[&Instance]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = m.forward(batch, false, &mut rng).unwrap();
    pass.graph.value(pass.logits).data().to_vec()
}

#[test]
fn static_only_logits_ignore_the_complementary_input() {
    let run = RunConfig {
        prompts: vec![PromptKind::Static],
        ..small_run()
    };
    let m = model(&run);
    let d = data();
    let a = d.train[0].clone();
    let mut b = a.clone();
    b.comp = d.train.iter().find(|i| i.group != a.group).unwrap().comp.clone();
    assert_eq!(logits(&m, &[&a]), logits(&m, &[&b]));
}

#[test]
fn identical_complementary_input_gives_identical_routing() {
    let m = model(&small_run());
    let d = data();
    let a = d.train[0].clone();
    let mut b = d.train[1].clone();
    b.comp = a.comp.clone();
    assert_ne!(a.main_tokens, b.main_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = m.forward(&[&a, &b], false, &mut rng).unwrap();
    for layer in m.routing_records(&pass) {
        assert_eq!(layer[0].scores, layer[1].scores);
        assert_eq!(layer[0].gated, layer[1].gated);
    }
}

#[test]
fn batch_permutation_permutes_logits() {
    let m = model(&small_run());
    let d = data();
    let batch: Vec<&Instance> = d.train.iter().take(5).collect();
    let order = [3, 0, 4, 1, 2];
    let permuted: Vec<&Instance> = order.iter().map(|&i| batch[i]).collect();
    let (a, b) = (logits(&m, &batch), logits(&m, &permuted));
    let c = 4;
    for (row, &src) in order.iter().enumerate() {
        for j in 0..c {
            let (x, y) = (b[row * c + j], a[src * c + j]);
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn static_rows_are_shared_while_conditioned_rows_vary() {
    let run = small_run();
    let m = model(&run);
    let d = data();
    let a = d.train[0].clone();
    let b = d.train.iter().find(|i| i.group != a.group).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = m.forward(&[&a, &b], false, &mut rng).unwrap();
    let (l, dim) = (run.prompt_len, run.hidden_dim);
    let rows = 2 * l + 1;
    for &block in &pass.prompt_blocks {
        let v = pass.graph.value(block).data();
        let inst = |i: usize| &v[i * rows * dim..(i + 1) * rows * dim];
        let (x, y) = (inst(0), inst(1));
        assert_eq!(&x[..l * dim], &y[..l * dim], "static rows differ");
        assert_ne!(&x[l * dim..2 * l * dim], &y[l * dim..2 * l * dim], "dynamic rows equal");
        assert_ne!(&x[2 * l * dim..], &y[2 * l * dim..], "mapped row equal");
    }
}

#[test]
fn loss_decomposes_every_step_and_encoders_stay_frozen() {
    let run = small_run();
    let d = data();
    let before = model(&run).encoder_checksums();
    let mut m = model(&run);
    let mut opt = AdamW::new(run.lr, (0.9, 0.999), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        for batch in mope::data::batches(&d.train, 16, &mut rng) {
            let r = m.train_step(&batch, &mut opt, lambda, 0.05, &mut rng).unwrap();
            let l = r.loss;
            assert!((l.total - (l.task_loss + lambda * l.applied_importance)).abs() <= 1e-7);
            assert!(l.applied_importance <= l.importance_loss + 1e-15);
            assert_eq!(l.lambda_imp, lambda);
        }
    }
    assert_eq!(m.encoder_checksums(), before);
}

#[test]
fn noiseless_runs_without_importance_repeat_exactly() {
    let run = RunConfig {
        lambda_imp: 0.0,
        noise_std: 0.0,
        ..small_run()
    };
    let d = data();
    let a = experiment::train::<f32>(&run, &d).unwrap();
    let b = experiment::train::<f32>(&run, &d).unwrap();
    let totals = |o: &experiment::TrainOutcome<f32>| o.log.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&a), totals(&b));
}

#[test]
fn multilabel_task_trains_with_binary_cross_entropy() {
    let run = RunConfig {
        label_mode: LabelMode::Multilabel,
        num_tags: 5,
        epochs: 2,
        ..small_run()
    };
    let d = Dataset::generate(&run.task().unwrap()).unwrap();
    let out = experiment::train::<f32>(&run, &d).unwrap();
    assert!(out.log.iter().all(|r| r.task_loss.is_finite()));
    // Per-tag BCE starts near ln 2.
    assert!((out.log[0].task_loss - std::f64::consts::LN_2).abs() < 0.1);
    let rep = out.model.evaluate(&d.test, 16).unwrap();
    assert_eq!(rep.per_class.len(), 5);
    assert!((0.0..=1.0).contains(&rep.f1_macro) && (0.0..=1.0).contains(&rep.f1_micro));
}

#[test]
fn bag_of_embeddings_and_baseline_modes_run() {
    for (kind, mode, prompts) in [
        (CompKind::BagOfEmbeddings, FusionMode::Fused, PromptKind::ALL.to_vec()),
        (CompKind::Transformer, FusionMode::MainOnly, vec![PromptKind::Static]),
        (CompKind::Transformer, FusionMode::CompOnly, PromptKind::ALL.to_vec()),
    ] {
        let run = RunConfig {
            comp_kind: kind,
            mode,
            prompts,
            ..small_run()
        };
        let d = data();
        let out = experiment::train::<f32>(&run, &d).unwrap();
        assert_eq!(out.log.len(), 4);
        let m = out.model;
        match mode {
            FusionMode::CompOnly => assert!(m.layers().is_empty()),
            _ => assert_eq!(m.layers().len(), run.num_layers),
        }
        m.evaluate(&d.test, 8).unwrap();
    }
}

#[test]
fn main_only_rejects_conditioned_prompts() {
    let run = RunConfig {
        mode: FusionMode::MainOnly,
        ..small_run()
    };
    assert!(matches!(run.validate(), Err(Error::Config(_))));
}

#[test]
fn diagnostics_require_dynamic_prompts() {
    let run = RunConfig {
        prompts: vec![PromptKind::Static, PromptKind::Mapped],
        ..small_run()
    };
    let d = data();
    let m = model(&run);
    assert!(matches!(experiment::diagnose(&m, &d.test, 8), Err(Error::Config(_))));
}

#[test]
fn contingency_rows_sum_to_group_sizes() {
    let run = small_run();
    let d = data();
    let m = model(&run);
    let dump = experiment::diagnose(&m, &d.test, 8).unwrap();
    for layer in &dump.layers {
        for g in 0..run.num_groups {
            let n: usize = layer.contingency.iter().map(|row| row[g]).sum();
            assert_eq!(n, d.test.iter().filter(|i| i.group == g).count());
        }
        let bound = (run.num_experts as f64).log2().min((run.num_groups as f64).log2());
        assert!((0.0..=bound + 1e-12).contains(&layer.mutual_information_bits));
        let sum: f64 = layer.importance.importance.iter().sum();
        assert!((sum - d.test.len() as f64).abs() < 1e-9);
    }
    assert_eq!(dump.routes.len(), d.test.len() * run.num_layers);
}

#[test]
fn pipeline_gradients_match_finite_differences_for_every_family() {
    let run = RunConfig {
        share_mapper: true,
        ..small_run()
    };
    let d = data();
    let rep = mope::gradcheck::check_pipeline(&run.fusion().unwrap(), &d.train[..3], 120, 1e-5, 1.0, 0.05, 5).unwrap();
    let families: Vec<String> = rep.by_family().into_iter().map(|f| f.0).collect();
    for f in ["static", "experts", "router", "mapper", "head", "comp_prompt"] {
        assert!(families.iter().any(|g| g == f), "{f} missing from {families:?}");
    }
    assert!(rep.max_rel_error <= 1e-3, "{}", rep.max_rel_error);
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attrsearch_core::engine;
use attrsearch_core::memory::MEMORY;
use attrsearch_core::model::Model;
use attrsearch_core::numerics::Tape;
use attrsearch_core::synthgen::{self, AttributeSchema, Dataset};
use attrsearch_core::trainer::{self, LossWeights, TrainConfig, Variant};

fn dataset() -> Dataset {
    let schema = AttributeSchema::default();
    let images = synthgen::generate_dataset(&schema, 520, 13).unwrap();
    let split = synthgen::split(&images, 40, 200, 13).unwrap();
    Dataset { schema, images, split }
}

fn config() -> TrainConfig {
    TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 3,
        stage3_epochs: 1,
        global_triplets_per_epoch: Some(600),
        ..TrainConfig::default()
    }
}

fn bytes_without(model: &Model, skip: impl Fn(&str) -> bool) -> Vec<(String, Vec<u8>)> {
    model.params.iter().filter(|(n, _)| !skip(n)).map(|(n, t)| (n.clone(), t.to_le_bytes())).collect()
}

#[test]
fn global_training_leaves_backbone_and_heads_untouched() {
    let data = dataset();
    let train = data.subset(&data.split.train).unwrap();
    let cfg = config();
    let s1 = trainer::train_stage1(&data.schema, &train, &cfg, 4).unwrap();
    let (local, _) = trainer::train_variant(&s1, &train, Variant::RankL, &cfg).unwrap();
    let (global, report) = trainer::train_variant(&s1, &train, Variant::RankLG, &cfg).unwrap();
    let (full, _) = trainer::train_variant(&s1, &train, Variant::Full, &cfg).unwrap();

    let non_global = |n: &str| n.starts_with("global/");
    assert_eq!(bytes_without(&local, non_global), bytes_without(&global, non_global));
    assert_ne!(local.params.get("global/lambda").unwrap(), global.params.get("global/lambda").unwrap());
    assert_eq!(report.stages.len(), 3);

    // only the full variant moves the memory block away from the class means
    assert_eq!(local.params.get(MEMORY).unwrap(), global.params.get(MEMORY).unwrap());
    assert_ne!(global.params.get(MEMORY).unwrap(), full.params.get(MEMORY).unwrap());
    let local_or_memory = |n: &str| n.starts_with("global/") || n == MEMORY;
    assert_eq!(bytes_without(&global, local_or_memory), bytes_without(&full, local_or_memory));
}

#[test]
fn joint_loss_never_reaches_global_parameters() {
    let data = dataset();
    let cfg = config();
    let mut model = Model::init(data.schema.clone(), cfg.model.clone(), 1).unwrap();
    let train = data.subset(&data.split.train).unwrap();
    trainer::build_model_memory(&mut model, &train).unwrap();
    let batch: Vec<_> = train.iter().take(6).map(|i| (&i.pixels, i.labels.as_slice())).collect();
    for variant in Variant::ALL {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let terms = trainer::joint_batch_loss(
            &mut tape,
            model.view(),
            &batch,
            variant.flags(),
            LossWeights::STAGE2,
            0.5,
            None,
            &mut rng,
        )
        .unwrap();
        let grads = tape.backward(terms.total).unwrap();
        assert!(grads.params().iter().all(|(n, _)| !n.starts_with("global/") && n != MEMORY), "{variant}");
        let touches_heads = grads.params().iter().any(|(n, _)| n.starts_with("head/"));
        assert_eq!(touches_heads, variant.flags().use_triplet, "{variant}");
        assert_eq!(terms.triplet.is_some(), variant.flags().use_triplet);
    }
}

#[test]
fn joint_total_is_the_weighted_sum_of_its_terms() {
    let data = dataset();
    let model = Model::init(data.schema.clone(), config().model, 2).unwrap();
    let train = data.subset(&data.split.train).unwrap();
    let batch: Vec<_> = train.iter().take(8).map(|i| (&i.pixels, i.labels.as_slice())).collect();
    let w = LossWeights { classification: 0.7, triplet: 1.3, head_classification: 0.4, global: 0.0 };
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = trainer::joint_batch_loss(&mut tape, model.view(), &batch, Variant::Rank.flags(), w, 1.0, None, &mut rng).unwrap();
    let v = |x| tape.value(x).item() as f64;
    let want = 0.7 * v(t.classification) + 1.3 * v(t.triplet.unwrap()) + 0.4 * v(t.head_classification.unwrap());
    assert!((v(t.total) - want).abs() < 1e-5 * want.abs().max(1.0));
}

#[test]
fn loss_curves_follow_the_variant() {
    let data = dataset();
    let (_, wo) = trainer::train(&data, Variant::WoRank, &config(), 8).unwrap();
    let stage2 = &wo.stages[1];
    assert!(stage2.epochs.iter().all(|e| e.keys().eq(["classification"].iter())));
    assert_eq!(wo.stages.len(), 2);

    let (_, rank) = trainer::train(&data, Variant::Rank, &config(), 8).unwrap();
    let totals: Vec<f64> = rank.stages[1].epochs.iter().map(|e| e["total"]).collect();
    assert_eq!(totals.len(), 3);
    assert!(totals[2] < totals[0], "stage-2 loss did not decrease: {totals:?}");
    assert!(rank.defaults.iter().any(|d| d.contains("batch size")));
}

#[test]
fn ablation_cells_match_saved_checkpoints() {
    let data = dataset();
    let dir = tempfile::tempdir().unwrap();
    let ks = [5, 10];
    let table = trainer::ablation_run(&data, &[Variant::Rank, Variant::RankLG], &ks, &[1], &config(), |v, seed, model, _| {
        model.save(&dir.path().join(format!("{v}-{seed}.ckpt")), Some(v.name().into()))
    })
    .unwrap();
    for row in &table.rows {
        let (model, meta) = Model::load(&dir.path().join(format!("{}-1.ckpt", row.variant))).unwrap();
        assert_eq!(meta.variant.as_deref(), Some(row.variant.name()));
        let (_, report) = trainer::evaluate_split(&model, &data, &ks).unwrap();
        assert_eq!(report.average, row.per_seed[0].average);
        for (ki, _) in ks.iter().enumerate() {
            assert_eq!(row.mean_average(ki), report.average[ki]);
        }
        // the index built from the reloaded model is the same as a fresh one
        let gallery = data.subset(&data.split.gallery).unwrap();
        assert_eq!(engine::index_gallery(&model, &gallery).unwrap().version, model.version());
    }
    assert!(table.to_csv().lines().count() == 1 + 2 * ks.len());
}

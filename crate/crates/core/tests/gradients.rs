//! Analytic gradients checked against central finite differences in f64.

mod common;

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;

use common::{analytic_grad, numeric_grad, rel_err};
use partreid::engine::{batch_losses, RunConfig};
use partreid::losses::{part_triplet_loss, TripletConfig};
use partreid::model::{ModelConfig, PartAttentionNet};
use partreid::nn::softmax_channels;
use partreid::part_attention::{part_attention_loss, AttentionMaps};
use partreid::synthetic_data::{make_splits, DataConfig, ParsingLabel, Sample};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attention_loss_gradient(
        logits in prop::collection::vec(-3.0f64..3.0, 2 * 7 * 12),
        classes in prop::collection::vec(0u8..7, 2 * 12),
        theta in 0.0f64..0.3,
    ) {
        let var = Var::from_tensor(&Tensor::from_vec(logits, (2, 7, 4, 3), &Device::Cpu).unwrap()).unwrap();
        let labels: Vec<ParsingLabel> = classes.chunks(12).map(|c| ParsingLabel::new(4, 3, c.to_vec()).unwrap()).collect();
        let refs: Vec<&ParsingLabel> = labels.iter().collect();
        let loss_of = |t: &Tensor| part_attention_loss(&AttentionMaps(softmax_channels(t).unwrap()), &refs, theta).unwrap();

        let analytic = analytic_grad(&loss_of(var.as_tensor()), &var);
        let coords: Vec<usize> = (0..analytic.len()).collect();
        let numeric = numeric_grad(&var, &coords, 1e-4, || loss_of(var.as_tensor()).to_scalar::<f64>().unwrap());
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            prop_assert!(rel_err(*a, *n) <= 1e-3, "coord {}: analytic {} numeric {}", i, a, n);
        }
    }

    #[test]
    fn triplet_loss_gradient_away_from_the_hinge(values in prop::collection::vec(-1.5f64..1.5, 8 * 6 * 4), margin in 0.1f64..0.5) {
        let ids = [0u32, 0, 1, 1, 2, 2, 3, 3];
        let cfg = TripletConfig { margin, part_count: 6 };
        let var = Var::from_tensor(&Tensor::from_vec(values, (8, 6, 4), &Device::Cpu).unwrap()).unwrap();
        let out = part_triplet_loss(var.as_tensor(), &ids, &cfg).unwrap();

        // every anchor's hinge argument must sit clearly on one side of zero
        let dist = partreid::losses::pairwise_part_distances(var.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for ((&a, &p), &q) in out.anchors.iter().zip(&out.hardest_positive).zip(&out.hardest_negative) {
            prop_assume!((dist[a][p] - dist[a][q] + margin).abs() > 1e-2);
        }
        let mined = (out.hardest_positive.clone(), out.hardest_negative.clone());
        let analytic = analytic_grad(&out.loss, &var);

        let mut stable = true;
        let coords: Vec<usize> = (0..analytic.len()).collect();
        let numeric = numeric_grad(&var, &coords, 1e-4, || {
            let o = part_triplet_loss(var.as_tensor(), &ids, &cfg).unwrap();
            stable &= (o.hardest_positive.clone(), o.hardest_negative.clone()) == mined;
            o.loss.to_scalar::<f64>().unwrap()
        });
        // the mined triplets must not flip under the perturbation
        prop_assume!(stable);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            prop_assert!(rel_err(*a, *n) <= 1e-3, "coord {}: analytic {} numeric {}", i, a, n);
        }
    }
}

fn tiny_samples() -> (DataConfig, Vec<Sample>) {
    let data = DataConfig {
        n_train_ids: 2,
        n_eval_ids: 2,
        samples_per_id: 3,
        queries_per_id: 1,
        ..DataConfig::default()
    };
    let splits = make_splits(&data).unwrap();
    // two identities, two samples each
    let mut picked = Vec::new();
    for id in 0..2 {
        picked.extend(splits.train.iter().filter(|s| s.identity == id).take(2).cloned());
    }
    (data, picked)
}

#[test]
fn end_to_end_gradient_reaches_embedding_weights() {
    let (data, samples) = tiny_samples();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut cfg = RunConfig {
        data,
        model: ModelConfig {
            encoder_channels: [4, 6, 6, 8],
            attention_mid_channels: 6,
            embed_dim: 5,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.train.n_ids = 2;
    cfg.train.n_per_id = 2;
    let net = PartAttentionNet::new(&cfg.model, 2, DType::F64, 7).unwrap();
    let images = net.image_batch(&refs).unwrap();
    let loss = || {
        // inference-mode batch norm keeps the objective a fixed function of the weights
        let out = net.forward(&images, false).unwrap();
        batch_losses(&net, &out, &refs, &cfg).unwrap().total
    };

    let weight = net.focuser().embed_conv().weight().clone();
    let analytic = analytic_grad(&loss(), &weight);
    let coords: Vec<usize> = (0..analytic.len()).step_by(analytic.len().div_ceil(12)).collect();
    let numeric = numeric_grad(&weight, &coords, 1e-3, || loss().to_scalar::<f64>().unwrap());
    assert!(analytic.iter().any(|g| g.abs() > 1e-8), "gradient vanished");
    for (&i, n) in coords.iter().zip(&numeric) {
        let a = analytic[i];
        assert!(rel_err(a, *n) <= 1e-2, "weight {i}: analytic {a} numeric {n}");
    }
}

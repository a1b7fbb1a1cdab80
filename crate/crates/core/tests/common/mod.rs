#![allow(dead_code)]

use anylevel::diffusion::objective::{batch_loss, loss_and_grad, prepare_batch};
use anylevel::diffusion::{cosine_schedule, ArchSpec, Denoiser, Tensor};
use anylevel::features::{build_feature_pyramid, EmbeddingProvider, ToyProvider};
use anylevel::layout::{AdmissibleLevels, BinaryMask, Layout, Region};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_arch(attention: bool) -> ArchSpec {
    ArchSpec {
        canvas_exponent: 3,
        image_channels: 3,
        channels: [4, 4, 6],
        embed_dim: 4,
        time_dim: 4,
        cond_dim: 6,
        groups: 2,
        attention,
        attention_dim: 3,
        diffusion_steps: 50,
    }
}

pub struct GradientReport {
    pub num_params: usize,
    /// Per parameter tensor: ‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖).
    pub group_errors: Vec<(String, f64)>,
}

/// Central differences over every parameter of a randomized tiny network.
/// The batch mixes a masked layout at several precisions, overlaps, and a
/// level-0 dropout draw so that injection, modulation and attention paths
/// all carry gradient.
pub fn gradient_check(arch: ArchSpec, seed: u64) -> GradientReport {
    let net = Denoiser::new(arch.clone()).unwrap();
    let params = net.random_params(seed, 0.2);
    let schedule = cosine_schedule(arch.diffusion_steps);
    let provider = ToyProvider::new(&["red circle", "blue square", "sky"], arch.embed_dim, seed).unwrap();
    let admissible = AdmissibleLevels::new(1, 3).unwrap();
    let layouts = [
        Layout::new(3, vec![
            Region::new(BinaryMask::rect(8, 0, 0, 5, 6), "red circle", 3),
            Region::new(BinaryMask::rect(8, 3, 2, 8, 8), "blue square", 2).with_weight(2.0),
        ]),
        Layout::new(3, vec![
            Region::new(BinaryMask::rect(8, 0, 0, 8, 4), "sky", 1),
            Region::new(BinaryMask::rect(8, 2, 2, 6, 7), "red circle", 3),
            Region::new(BinaryMask::ones(8), "blue square", 0),
        ]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<_> = layouts
        .iter()
        .map(|l| {
            let l = l.clone().with_admissible(admissible.clone());
            (Tensor::randn(3, 8, 8, &mut rng).map(|v| v.tanh()), build_feature_pyramid(&l, &provider).unwrap())
        })
        .collect();
    let mut items = prepare_batch(&net, &schedule, &batch, 0.0, provider.null_embedding(), &mut rng).unwrap();
    let dropped = prepare_batch(&net, &schedule, &batch[..1], 1.0, provider.null_embedding(), &mut rng).unwrap();
    items.extend(dropped);

    let (_, analytic) = loss_and_grad(&net, &params, &schedule, &items).unwrap();
    let h = 1e-5;
    let mut numeric = vec![0.0; params.len()];
    let mut probe = params.clone();
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = batch_loss(&net, &probe, &schedule, &items).unwrap();
        probe[i] = params[i] - h;
        let down = batch_loss(&net, &probe, &schedule, &items).unwrap();
        probe[i] = params[i];
        numeric[i] = (up - down) / (2.0 * h);
    }
    let group_errors = net
        .param_space()
        .entries()
        .map(|(name, r)| {
            let a = r.slice(&analytic);
            let n = r.slice(&numeric);
            let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
            let err = if scale < 1e-10 { diff } else { diff / scale };
            (name.to_string(), err)
        })
        .collect();
    GradientReport { num_params: params.len(), group_errors }
}

/// Randomly initialized toy-vocabulary model at L = 3 for plumbing tests.
pub fn tiny_model(diffusion_steps: u32) -> anylevel::diffusion::Model {
    use anylevel::diffusion::{CheckpointHeader, Model, ModelCheckpoint};
    use anylevel::scene::SceneSpec;
    let spec = SceneSpec::toy(3);
    let arch = ArchSpec { channels: [4, 4, 4], ..ArchSpec::toy(3, 8, diffusion_steps) };
    let provider = ToyProvider::new(&spec.concept_names(), 8, 0).unwrap();
    let net = Denoiser::new(arch.clone()).unwrap();
    let header = CheckpointHeader {
        arch,
        schedule: cosine_schedule(diffusion_steps),
        vocabulary: provider.vocabulary().clone(),
        admissible_levels: spec.admissible_levels.clone(),
        scene_spec: Some(spec),
        training: None,
        dataset_checksum: None,
        step: 0,
    };
    Model::new(ModelCheckpoint { header, params: net.random_params(1, 0.1) }).unwrap()
}

//! Tape gradients of every training objective against central differences
//! at spot-checked parameters, in f64.

use rarelab::align::{AttributeBranches, BranchConfig, TextEncoder, TextEncoderConfig};
use rarelab::attributes::VocabManifest;
use rarelab::corpus::{make_corpus, CorpusConfig, CorpusPair};
use rarelab::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use rarelab::nn::{ParamId, ParamStore};
use rarelab::oneshot::{init_prototype, recon_loss_and_grad};
use rarelab::train::{probe_loss, AlignConfig, TrainConfig};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

struct Models {
    den: Denoiser<f64>,
    text: TextEncoder<f64>,
    branches: AttributeBranches<f64>,
}

fn models() -> Models {
    Models {
        den: Denoiser::new(DenoiserConfig { widths: [8, 8, 8], time_dim: 8, embed_dim: 16, cond_dim: 16, attn_dim: 8, ..Default::default() })
            .unwrap(),
        text: TextEncoder::new(TextEncoderConfig { dim: 16, hidden: 16, ..Default::default() }),
        branches: AttributeBranches::new(BranchConfig { widths: [4, 4, 8, 8], hidden: 16, dim: 16, ..Default::default() }).unwrap(),
    }
}

fn corpus() -> Vec<CorpusPair<f64>> {
    let v = VocabManifest::default();
    make_corpus(&CorpusConfig { n: 6, seed: 2, ..Default::default() }, &v, &v.holdouts()).unwrap()
}

fn cfg(align_weight: f64) -> AlignConfig {
    AlignConfig { train: TrainConfig { steps: 1, batch: 3, seed: 5, ..Default::default() }, lambda: 0.7, align_weight, unit_norm: true }
}

#[derive(Clone, Copy)]
enum Which {
    Den,
    Text,
    Branches,
}

fn store(m: &mut Models, w: Which) -> &mut ParamStore<f64> {
    match w {
        Which::Den => m.den.params_mut(),
        Which::Text => m.text.params_mut(),
        Which::Branches => m.branches.params_mut(),
    }
}

fn loss(m: &Models, c: &[CorpusPair<f64>], a: &AlignConfig) -> f64 {
    let sched = NoiseSchedule::default_linear();
    probe_loss(&m.den, &m.text, Some(&m.branches), c, &sched, a).unwrap().0
}

/// Check a handful of elements spread over every tensor of one store.
fn check_store(w: Which, a: &AlignConfig) {
    let c = corpus();
    let mut m = models();
    let sched = NoiseSchedule::default_linear();
    let (_, g) = probe_loss(&m.den, &m.text, Some(&m.branches), &c, &sched, a).unwrap();
    let grads = g.param_grads(store(&mut m, w));
    let ids: Vec<ParamId> = store(&mut m, w).ids().collect();
    let mut checked = 0;
    for (k, id) in ids.iter().enumerate() {
        let Some(grad) = &grads[k] else { continue };
        let n = grad.len();
        for j in [0, n / 2, n - 1] {
            let orig = store(&mut m, w).get(*id).data()[j];
            store(&mut m, w).get_mut(*id).data_mut()[j] = orig + H;
            let up = loss(&m, &c, a);
            store(&mut m, w).get_mut(*id).data_mut()[j] = orig - H;
            let down = loss(&m, &c, a);
            store(&mut m, w).get_mut(*id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grad.data()[j];
            let scale = analytic.abs().max(numeric.abs());
            // below this, float roundoff in the loss dominates the difference
            if scale < 1e-5 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            let name = store(&mut m, w).name(*id).to_string();
            assert!(rel <= TOL, "{name}[{j}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}");
            checked += 1;
        }
    }
    assert!(checked >= 10, "only {checked} elements had a usable gradient");
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    check_store(Which::Den, &cfg(0.0));
}

#[test]
fn text_encoder_gradients_match_finite_differences() {
    check_store(Which::Text, &cfg(0.5));
}

#[test]
fn branch_gradients_match_finite_differences() {
    check_store(Which::Branches, &cfg(0.5));
}

#[test]
fn prototype_gradient_matches_finite_differences() {
    let c = corpus();
    let mut m = models();
    m.den.params_mut().freeze();
    let sched = NoiseSchedule::default_linear();
    let tokens = init_prototype(&m.text, "JPS", 3).unwrap();
    let image = &c[0].image;
    let (_, grad) = recon_loss_and_grad(image, &tokens, &m.den, &sched, 2, 9).unwrap();
    // tiny components are dominated by roundoff in the difference quotient
    let floor = grad.data().iter().fold(0.0f64, |a, v| a.max(v.abs())) * 1e-2;
    let mut checked = 0;
    for j in (0..tokens.len()).step_by(5) {
        let mut up = tokens.clone();
        up.data_mut()[j] += H;
        let mut down = tokens.clone();
        down.data_mut()[j] -= H;
        let numeric = (recon_loss_and_grad(image, &up, &m.den, &sched, 2, 9).unwrap().0
            - recon_loss_and_grad(image, &down, &m.den, &sched, 2, 9).unwrap().0)
            / (2.0 * H);
        let analytic = grad.data()[j];
        let scale = analytic.abs().max(numeric.abs());
        if scale < floor {
            continue;
        }
        checked += 1;
        assert!((analytic - numeric).abs() / scale <= TOL, "token elem {j}: {analytic:e} vs {numeric:e}");
    }
    assert!(checked >= 5, "only {checked} elements had a usable gradient");
}

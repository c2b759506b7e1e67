//! Finite-difference checks of every tape operation on small random inputs.

use elecrec::autodiff::{Graph, Scalar, Tensor, Var};
use elecrec::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, LossFn, Report};

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f32(shape, &v).unwrap()
}

/// `sum(x ⊙ c)` projects any output onto a scalar with distinct weights.
fn project<F: Scalar>(g: &mut Graph<F>, x: Var, c: Var) -> Result<Var> {
    let p = g.mul(x, c)?;
    Ok(g.sum(p))
}

struct MatMulLoss;
impl LossFn for MatMulLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let y = g.matmul(x[0], x[1])?;
        project(g, y, x[2])
    }
}

struct MatMulNtLoss;
impl LossFn for MatMulNtLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let y = g.matmul_nt(x[0], x[1])?;
        project(g, y, x[2])
    }
}

pub fn matmul() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 2], 1.0), random(&mut rng, &[3, 2], 1.0)];
    check(&MatMulLoss, &inputs, &[0, 1])
}

pub fn matmul_nt() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = [random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[5, 4], 1.0), random(&mut rng, &[3, 5], 1.0)];
    check(&MatMulNtLoss, &inputs, &[0, 1])
}

struct EmbeddingLoss;
impl LossFn for EmbeddingLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let e = g.embedding(x[0], &[2, 0, 6, 2, 3, 3, 1, 5], &[2, 4])?;
        project(g, e, x[1])
    }
}

pub fn embedding() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&mut rng, &[7, 3], 1.0), random(&mut rng, &[2, 4, 3], 1.0)];
    check(&EmbeddingLoss, &inputs, &[0])
}

struct CeLoss;
impl LossFn for CeLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        g.softmax_cross_entropy(x[0], &[1, 4, 0, 2], &[false, false, true, false])
    }
}

struct BceLoss;
impl LossFn for BceLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        g.sigmoid_bce(x[0], &[true, false, false, true, true, false], &[false, false, false, false, true, false])
    }
}

pub fn softmax_cross_entropy() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(&CeLoss, &[random(&mut rng, &[4, 5], 3.0)], &[0])
}

pub fn sigmoid_bce() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    check(&BceLoss, &[random(&mut rng, &[6], 4.0)], &[0])
}

struct LayerNormLoss;
impl LossFn for LayerNormLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
        project(g, y, x[3])
    }
}

pub fn layer_norm() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [
        random(&mut rng, &[2, 4], 2.0),
        random(&mut rng, &[4], 1.5),
        random(&mut rng, &[4], 1.0),
        random(&mut rng, &[2, 4], 1.0),
    ];
    check(&LayerNormLoss, &inputs, &[0, 1, 2])
}

struct ElementwiseLoss;
impl LossFn for ElementwiseLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let a = g.gelu(x[0]);
        let b = g.add_broadcast(a, x[1])?;
        let c = g.scale(b, F::of(0.7));
        let d = g.add(c, x[0])?;
        let e = g.reshape(d, &[3, 4])?;
        let f = g.fill_column(e, 2, F::of(-1e9))?;
        let h = g.mul(f, x[2])?;
        let s = g.sum_last_axis(h);
        let m = g.mul(s, s)?;
        Ok(g.sum(m))
    }
}

/// GELU, broadcast add, scale, add, reshape, column fill, mul and sums.
pub fn elementwise() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut weights = random(&mut rng, &[3, 4], 1.0);
    // keep the filled column out of the projection so the loss stays O(1)
    for r in 0..3 {
        weights.data_mut()[r * 4 + 2] = 0.0;
    }
    let inputs = [random(&mut rng, &[2, 6], 2.0), random(&mut rng, &[6], 1.0), weights];
    check(&ElementwiseLoss, &inputs, &[0, 1])
}

struct DropoutLoss;
impl LossFn for DropoutLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = g.dropout(x[0], 0.3, &mut rng);
        project(g, y, x[1])
    }
}

pub fn dropout() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&mut rng, &[4, 5], 1.0), random(&mut rng, &[4, 5], 1.0)];
    check(&DropoutLoss, &inputs, &[0])
}

pub fn attention_mask(b: usize, w: usize, pad: &[usize]) -> Tensor {
    let mut m = vec![0.0f32; b * w * w];
    for bi in 0..b {
        for t in 0..w {
            for j in 0..w {
                if j > t || j < pad[bi] {
                    m[bi * w * w + t * w + j] = -1e9;
                }
            }
        }
    }
    Tensor::from_f32(&[b, w, w], &m).unwrap()
}

struct AttentionLoss;
impl LossFn for AttentionLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let mask = attention_mask(2, 3, &[0, 1]).cast();
        let y = g.attention(x[0], x[1], x[2], &mask, 2)?;
        project(g, y, x[3])
    }
}

pub fn attention() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut proj = random(&mut rng, &[2, 3, 4], 1.0);
    // the fully masked query row of the padded sequence is never read
    proj.data_mut()[12..16].iter_mut().for_each(|v| *v = 0.0);
    let inputs = [
        random(&mut rng, &[2, 3, 4], 1.5),
        random(&mut rng, &[2, 3, 4], 1.5),
        random(&mut rng, &[2, 3, 4], 1.5),
        proj,
    ];
    check(&AttentionLoss, &inputs, &[0, 1, 2])
}

pub struct TwoLayerLoss;
impl LossFn for TwoLayerLoss {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let h = g.matmul(x[0], x[1])?;
        let h = g.add_broadcast(h, x[2])?;
        let h = g.gelu(h);
        let h = g.layer_norm(h, x[3], x[4], 1e-5)?;
        let logits = g.matmul(h, x[5])?;
        g.softmax_cross_entropy(logits, &[0, 3, 2], &[false, false, false])
    }
}

pub fn two_layer_inputs(seed: u64) -> [Tensor; 6] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [
        random(&mut rng, &[3, 4], 1.0),
        random(&mut rng, &[4, 5], 1.0),
        random(&mut rng, &[5], 0.5),
        random(&mut rng, &[5], 1.5),
        random(&mut rng, &[5], 0.5),
        random(&mut rng, &[5, 4], 1.0),
    ]
}

pub fn two_layer() -> Report {
    check(&TwoLayerLoss, &two_layer_inputs(8), &[1, 2, 3, 4, 5])
}

pub fn all() -> Vec<(&'static str, Report)> {
    vec![
        ("matmul", matmul()),
        ("matmul_nt", matmul_nt()),
        ("embedding", embedding()),
        ("softmax_cross_entropy", softmax_cross_entropy()),
        ("sigmoid_bce", sigmoid_bce()),
        ("layer_norm", layer_norm()),
        ("elementwise", elementwise()),
        ("dropout", dropout()),
        ("attention", attention()),
        ("two_layer", two_layer()),
    ]
}

//! Finite-difference verification of analytic gradients.
//!
//! The checks here compare a backward pass against central finite differences
//! of the corresponding forward evaluation, so they remain valid no matter
//! how the backward implementation changes.

use crate::tape::{NodeId, Tape, TapeError, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative error between two gradient vectors:
/// `||a - b|| / max(||a||, ||b||, 1e-8)`.
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Check the backward pass of a tape subgraph against finite differences.
///
/// `build` constructs the subgraph from leaf nodes for `inputs`. The output
/// is projected onto a fixed random direction to obtain a scalar; each input
/// element is then perturbed by `1e-5 * max(1, |x|)`. Returns the worst
/// relative error over all inputs.
pub fn tape_gradient_check(
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TapeError>,
    inputs: &[Tensor],
    seed: u64,
) -> Result<f64, TapeError> {
    let evaluate = |tensors: &[Tensor], proj: Option<&[f64]>| -> Result<(f64, Vec<f64>, Vec<Vec<f64>>), TapeError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids)?;
        let out_val = tape.value(out);
        let proj: Vec<f64> = match proj {
            Some(p) => p.to_vec(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                (0..out_val.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
            }
        };
        let scalar: f64 = out_val.data().iter().zip(&proj).map(|(a, b)| a * b).sum();
        let seed_tensor = Tensor::from_vec(out_val.shape(), proj.clone())?;
        let grads = tape.backward(&[(out, seed_tensor)])?;
        let leaf_grads = ids
            .iter()
            .zip(tensors)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()).into_data())
            .collect();
        Ok((scalar, proj, leaf_grads))
    };

    let (_, proj, analytic) = evaluate(inputs, None)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut fd = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let x = input.data()[j];
            let eps = 1e-5 * x.abs().max(1.0);
            let mut hi = inputs.to_vec();
            hi[i].data_mut()[j] = x + eps;
            let mut lo = inputs.to_vec();
            lo[i].data_mut()[j] = x - eps;
            let (shi, _, _) = evaluate(&hi, Some(&proj))?;
            let (slo, _, _) = evaluate(&lo, Some(&proj))?;
            fd[j] = (shi - slo) / (2.0 * eps);
        }
        worst = worst.max(gradient_relative_error(&analytic[i], &fd));
    }
    Ok(worst)
}

/// Check a hand-written analytic gradient of a scalar function against
/// central finite differences with step `eps`. Returns the relative error.
pub fn scalar_gradient_check(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += eps;
        lo[i] -= eps;
        fd[i] = (f(&hi) - f(&lo)) / (2.0 * eps);
    }
    gradient_relative_error(analytic, &fd)
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Like [`rand_tensor`] but bounded away from zero, for ops with a kink there.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Run `instances` randomized finite-difference checks for every registered
/// tape op; returns `(op name, worst relative error)` per op.
pub fn check_all_ops(seed: u64, instances: usize) -> Result<Vec<(String, f64)>, TapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(String, f64)> = Vec::new();
    let record = |name: &str, err: f64, results: &mut Vec<(String, f64)>| {
        if let Some(entry) = results.iter_mut().find(|(n, _)| n == name) {
            entry.1 = entry.1.max(err);
        } else {
            results.push((name.to_string(), err));
        }
    };

    for k in 0..instances {
        let case_seed = seed.wrapping_mul(1009).wrapping_add(k as u64);

        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 3, 4], &mut rng);
        let err = tape_gradient_check(|t, ids| t.add(ids[0], ids[1]), &[a, b], case_seed)?;
        record("add", err, &mut results);

        let a = rand_tensor(&[3, 5], &mut rng);
        let bias = rand_tensor(&[5], &mut rng);
        let err = tape_gradient_check(|t, ids| t.add(ids[0], ids[1]), &[a, bias], case_seed)?;
        record("add_broadcast", err, &mut results);

        let a = rand_tensor(&[4, 3], &mut rng);
        let b = rand_tensor(&[4, 3], &mut rng);
        let err = tape_gradient_check(|t, ids| t.mul(ids[0], ids[1]), &[a, b], case_seed)?;
        record("mul", err, &mut results);

        let a = rand_tensor(&[6], &mut rng);
        let c = rng.gen_range(-2.0..2.0);
        let err = tape_gradient_check(|t, ids| Ok(t.add_scalar(ids[0], c)), &[a], case_seed)?;
        record("add_scalar", err, &mut results);

        let a = rand_tensor(&[6], &mut rng);
        let c = rng.gen_range(-2.0..2.0);
        let err = tape_gradient_check(|t, ids| Ok(t.mul_scalar(ids[0], c)), &[a], case_seed)?;
        record("mul_scalar", err, &mut results);

        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        let err = tape_gradient_check(|t, ids| t.matmul(ids[0], ids[1]), &[a, b], case_seed)?;
        record("matmul", err, &mut results);

        for stride in [1usize, 2] {
            let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
            let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let bias = rand_tensor(&[3], &mut rng);
            let err = tape_gradient_check(
                |t, ids| t.conv2d(ids[0], ids[1], ids[2], stride),
                &[x, w, bias],
                case_seed,
            )?;
            record(&format!("conv2d_stride{stride}"), err, &mut results);
        }

        let a = rand_tensor_off_zero(&[3, 7], &mut rng);
        let err = tape_gradient_check(|t, ids| Ok(t.relu(ids[0])), &[a], case_seed)?;
        record("relu", err, &mut results);

        let a = rand_tensor(&[3, 7], &mut rng);
        let err = tape_gradient_check(|t, ids| Ok(t.sigmoid(ids[0])), &[a], case_seed)?;
        record("sigmoid", err, &mut results);

        let a = rand_tensor(&[3, 7], &mut rng);
        let err = tape_gradient_check(|t, ids| Ok(t.softplus(ids[0])), &[a], case_seed)?;
        record("softplus", err, &mut results);

        let a = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let err = tape_gradient_check(|t, ids| t.upsample2x(ids[0]), &[a], case_seed)?;
        record("upsample2x", err, &mut results);

        let a = rand_tensor(&[2, 6], &mut rng);
        let err = tape_gradient_check(|t, ids| t.reshape(ids[0], &[3, 4]), &[a], case_seed)?;
        record("reshape", err, &mut results);

        let a = rand_tensor(&[2, 3, 4, 2], &mut rng);
        let err =
            tape_gradient_check(|t, ids| t.reduce_mean(ids[0], &[2, 3]), &[a], case_seed)?;
        record("reduce_mean", err, &mut results);

        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 2], &mut rng);
        let c2 = rand_tensor(&[2, 1], &mut rng);
        let err = tape_gradient_check(
            |t, ids| t.concat(&[ids[0], ids[1], ids[2]], 1),
            &[a, b, c2],
            case_seed,
        )?;
        record("concat", err, &mut results);

        let a = rand_tensor(&[3, 7], &mut rng);
        let err = tape_gradient_check(|t, ids| t.slice(ids[0], 1, 2, 4), &[a], case_seed)?;
        record("slice", err, &mut results);
    }
    Ok(results)
}

use worldforge::autodiff::{grad_check_multi, AutodiffError, GradCheckReport, Graph, Tensor, Var};
use worldforge::rng::substream;

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>;

/// Contracts a non-scalar output against a fixed weight tensor so every
/// output entry carries a distinct cotangent.
fn readout(g: &mut Graph, y: Var) -> Result<Var, AutodiffError> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| (0.7 * i as f64 + 0.3).sin()));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| { let y = g.add(v[0], v[1])?; readout(g, y) }),
        ("add_broadcast", vec![vec![3, 4], vec![1, 4]], |g, v| { let y = g.add(v[0], v[1])?; readout(g, y) }),
        ("sub", vec![vec![2, 3, 2], vec![2, 1, 2]], |g, v| { let y = g.sub(v[0], v[1])?; readout(g, y) }),
        ("mul", vec![vec![3, 4], vec![3, 1]], |g, v| { let y = g.mul(v[0], v[1])?; readout(g, y) }),
        ("div", vec![vec![3, 4], vec![1, 4]], |g, v| {
            let d = g.exp(v[1])?;
            let y = g.div(v[0], d)?;
            readout(g, y)
        }),
        ("scale", vec![vec![5]], |g, v| { let y = g.scale(v[0], -1.7)?; readout(g, y) }),
        ("add_scalar", vec![vec![5]], |g, v| {
            let y = g.add_scalar(v[0], 0.4)?;
            let y = g.mul(y, y)?;
            readout(g, y)
        }),
        ("silu", vec![vec![4, 3]], |g, v| { let y = g.silu(v[0])?; readout(g, y) }),
        ("relu", vec![vec![4, 3]], |g, v| { let y = g.relu(v[0])?; readout(g, y) }),
        ("tanh", vec![vec![4, 3]], |g, v| { let y = g.tanh(v[0])?; readout(g, y) }),
        ("exp", vec![vec![4, 3]], |g, v| { let y = g.exp(v[0])?; readout(g, y) }),
        ("sum", vec![vec![3, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        }),
        ("mean", vec![vec![3, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        }),
        ("sum_axis0", vec![vec![3, 4]], |g, v| { let y = g.sum_axis(v[0], 0)?; readout(g, y) }),
        ("sum_axis1", vec![vec![2, 3, 4]], |g, v| { let y = g.sum_axis(v[0], 1)?; readout(g, y) }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y) }),
        ("transpose", vec![vec![3, 4]], |g, v| { let y = g.transpose(v[0])?; readout(g, y) }),
        ("softmax", vec![vec![3, 5]], |g, v| { let y = g.softmax(v[0])?; readout(g, y) }),
        ("softmax_masked", vec![vec![3, 4]], |g, v| {
            let mask = [true, false, true, true, false, true, false, false, true, true, true, true];
            let y = g.softmax_masked(v[0], &mask)?;
            readout(g, y)
        }),
        ("layer_norm", vec![vec![3, 6]], |g, v| { let y = g.layer_norm(v[0], 1e-5)?; readout(g, y) }),
        ("reshape", vec![vec![3, 4]], |g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            let y = g.mul(y, y)?;
            readout(g, y)
        }),
        ("slice", vec![vec![4, 5]], |g, v| { let y = g.slice(v[0], 1, 1, 3)?; readout(g, y) }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1], v[0]], 1)?;
            let y = g.mul(y, y)?;
            readout(g, y)
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            let y = g.tanh(y)?;
            readout(g, y)
        }),
        ("scatter_rows", vec![vec![4, 3]], |g, v| {
            let y = g.scatter_rows(v[0], &[1, 1, 0, 4], 5)?;
            let y = g.mul(y, y)?;
            readout(g, y)
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], |g, v| g.mse(v[0], v[1])),
        ("attention_block", vec![vec![4, 6], vec![6, 6], vec![6, 6]], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let p = g.softmax(s)?;
            let o = g.matmul(p, v[0])?;
            let o = g.layer_norm(o, 1e-5)?;
            readout(g, o)
        }),
    ]
}

/// Central-difference gradient check of every graph op on seeded inputs.
pub fn op_catalog(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    ops()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut rng = substream(seed, name);
            let xs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(&mut rng, s, -1.5, 1.5)).collect();
            (name, grad_check_multi(f, &xs, 1e-6, None).unwrap())
        })
        .collect()
}

//! Fits a single partial convolution to a box blur on a sparse input with
//! Adam, showing how the validity mask grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatdenoise::nn::{Adam, AdamConfig, Graph, ParamStore, PartialConv, Tensor};

fn main() -> splatdenoise::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (16, 16);
    let mut store = ParamStore::<f64>::new();
    let layer = PartialConv::new(&mut store, "blur", 1, 1, 3, 1, &mut rng)?;
    let x: Vec<f64> = (0..h * w).map(|i| if rng.gen_bool(0.3) { 1.0 + (i % w) as f64 / w as f64 } else { 0.0 }).collect();
    let mask: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect();
    let target: Vec<f64> = (0..h * w).map(|i| 1.0 + (i % w) as f64 / w as f64).collect();
    let x = Tensor::from_vec([1, 1, h, w], x)?;
    let mask = Tensor::from_vec([1, 1, h, w], mask)?;

    let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &store);
    for it in 0..=300 {
        let mut g = Graph::new();
        let input = g.masked_input(x.clone(), mask.clone(), false)?;
        let y = g.partial_conv(&store, input, &layer)?;
        let m = g.mask(y);
        let (mut loss, mut grad) = (0.0, vec![0.0; h * w]);
        for i in 0..h * w {
            if m.data()[i] > 0.0 {
                let r = g.value(y).data()[i] - target[i];
                loss += r * r;
                grad[i] = 2.0 * r;
            }
        }
        if it == 0 {
            let before = mask.data().iter().sum::<f64>();
            println!("valid pixels: {before} in, {} out", m.data().iter().sum::<f64>());
        }
        if it % 100 == 0 {
            println!("iter {it:3}: squared error {loss:.5}");
        }
        store.zero_grad();
        g.backward_with(&mut store, y, Tensor::from_vec([1, 1, h, w], grad)?)?;
        adam.step(&mut store)?;
    }
    Ok(())
}

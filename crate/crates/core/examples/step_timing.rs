//! Times forward + backward of one batch at the default configuration.
//! The optional argument is the number of repetitions.

use std::time::Instant;

use autodiff::{Graph, Tensor};
use moon::datamodel::{ordinal_encode, Grade, Organ};
use moon::losses::{overall_loss, LossConfig};
use moon::model::{CaseInputs, ModelConfig, MoonModel};

fn main() {
    let cfg = ModelConfig::default();
    let model = MoonModel::new(&cfg).unwrap();
    println!("parameters: {}", model.params().num_scalars());
    let cases: Vec<CaseInputs> = (0..8)
        .map(|c| CaseInputs {
            volumes: Organ::ALL.map(|o| {
                let [h, w, d] = *cfg.input_dims.get(o);
                Tensor::from_fn(&[h, w, d, 1], |i| ((i * 7 + c) % 13) as f64 / 13.0)
            }),
        })
        .collect();
    let targets: Vec<_> = (0..8).map(|i| ordinal_encode(Grade::ALL[i % 3])).collect();
    for _ in 0..std::env::args().nth(1).map_or(3, |a| a.parse().unwrap()) {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let pv = model.params().bind(&mut g, true);
        let out = model.forward(&mut g, &pv, &cases.iter().collect::<Vec<_>>()).unwrap();
        let loss = overall_loss(&mut g, out.logits, &targets, &LossConfig::default(), true).unwrap();
        let t1 = Instant::now();
        let grads = g.backward(loss.total);
        let t2 = Instant::now();
        drop(grads);
        println!(
            "nodes {} forward {:?} backward {:?} loss {}",
            g.len(),
            t1 - t0,
            t2 - t1,
            g.value(loss.total).item()
        );
    }
}

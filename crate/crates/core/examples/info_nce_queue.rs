//! InfoNCE against a FIFO memory queue, and the momentum update of the key
//! encoder.

use insloc::contrastive::{info_nce_loss, EncoderPair, MemoryQueue};
use insloc::nn::{Backbone, BackboneConfig};
use insloc::rng::stream;
use insloc::Tensor;

fn basis(d: usize, i: usize) -> Vec<f64> {
    (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
}

fn main() -> insloc::Result<()> {
    // q equal to its positive, eight orthogonal negatives.
    let q = Tensor::from_vec(&[1, 9], basis(9, 0))?;
    let mut queue = MemoryQueue::empty(8, 9)?;
    queue.enqueue(&Tensor::from_vec(&[8, 9], (1..9).flat_map(|i| basis(9, i)).collect())?)?;
    let out = info_nce_loss(&q, &q, &queue, 0.2)?;
    let e5 = 5f64.exp();
    println!("loss {:.6}, closed form {:.6}", out.loss, -(e5 / (e5 + 8.0)).ln());

    // The ring overwrites its oldest rows first.
    let mut ring = MemoryQueue::<f64>::empty(4, 2)?;
    for (a, b) in [(0.0, 1.0), (1.0, 0.0), (0.6, 0.8)] {
        ring.enqueue(&Tensor::from_vec(&[2, 2], vec![a, b, b, a])?)?;
        println!(
            "cursor {} filled {} rows {:?}",
            ring.cursor(),
            ring.filled(),
            ring.storage()
        );
    }

    let mut rng = stream(0, "example", 0);
    let mut pair = EncoderPair::new(Backbone::<f32>::new(BackboneConfig::default(), &mut rng)?, 0.999);
    pair.query.stages[0][0].weight.value.fill(0.0);
    pair.momentum_update()?;
    let k = pair.key.stages[0][0].weight.value.data()[0];
    println!("after one EMA step toward a zeroed query, a key weight is {k:.6}");
    Ok(())
}

use cacpipe_core::gradnet::{backward_range, forward_train, NetSpec, NetState, Tensor};
use std::time::Instant;

fn main() {
    // Scoring net, batch 16, 224x224 inputs.
    let spec = NetSpec::scoring(1).unwrap();
    let mut state = NetState::<f32>::init(&spec, 1);
    let n = 16usize;
    let mut data = vec![0.0f32; n * 224 * 224];
    for (i, v) in data.iter_mut().enumerate() {
        *v = ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0;
    }
    let x = Tensor::new(&[n, 1, 224, 224], data).unwrap();

    let t0 = Instant::now();
    let (out, cache) = forward_train(&spec, &mut state, &x, 0, true).unwrap();
    let fwd = t0.elapsed();
    let dout = Tensor::<f64>::new(&out.shape, vec![1.0 / n as f64; out.data.len()]).unwrap();
    let t1 = Instant::now();
    let (_grads, _dx) = backward_range(&spec, &state, &cache, &dout).unwrap();
    let bwd = t1.elapsed();
    println!("scoring batch16: fwd {:?} bwd {:?} total {:?}", fwd, bwd, fwd + bwd);

    // Registration net on downsampled 27x27x20 volume (prepool skipped via from=1).
    let rspec = NetSpec::registration(1).unwrap();
    let mut rstate = NetState::<f32>::init(&rspec, 2);
    let mut rdata = vec![0.0f32; 27 * 27 * 20];
    for (i, v) in rdata.iter_mut().enumerate() {
        *v = ((i * 40503) % 1000) as f32 / 500.0 - 1.0;
    }
    let rx = Tensor::new(&[1, 1, 20, 27, 27], rdata).unwrap();
    let t2 = Instant::now();
    let (rout, rcache) = forward_train(&rspec, &mut rstate, &rx, 1, true).unwrap();
    let rfwd = t2.elapsed();
    let rdout = Tensor::<f64>::new(&rout.shape, vec![0.1; rout.data.len()]).unwrap();
    let t3 = Instant::now();
    let _ = backward_range(&rspec, &rstate, &rcache, &rdout).unwrap();
    let rbwd = t3.elapsed();
    println!("registration single: fwd {:?} bwd {:?} total {:?}", rfwd, rbwd, rfwd + rbwd);
}

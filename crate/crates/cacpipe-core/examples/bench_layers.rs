use cacpipe_core::gradnet::{backward_range, forward_train, LayerSpec, NetSpec, NetState, Tensor};
use std::time::Instant;

fn bench(name: &str, spec: NetSpec, shape: &[usize]) {
    let mut state = NetState::<f32>::init(&spec, 1);
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f32; n];
    for (i, v) in data.iter_mut().enumerate() {
        *v = ((i * 2654435761) % 1000) as f32 / 500.0 - 1.0;
    }
    let x = Tensor::new(shape, data).unwrap();
    let t0 = Instant::now();
    let (out, cache) = forward_train(&spec, &mut state, &x, 0, false).unwrap();
    let fwd = t0.elapsed();
    let dout = Tensor::<f64>::new(&out.shape, vec![0.5; out.data.len()]).unwrap();
    let t1 = Instant::now();
    let _ = backward_range(&spec, &state, &cache, &dout).unwrap();
    let bwd = t1.elapsed();
    println!("{name}: fwd {fwd:?} bwd {bwd:?}");
}

fn main() {
    bench("conv2 1->32 @224", NetSpec::new(vec![LayerSpec::Conv2 { cin: 1, cout: 32 }]), &[16, 1, 224, 224]);
    bench("conv2 32->32 @112", NetSpec::new(vec![LayerSpec::Conv2 { cin: 32, cout: 32 }]), &[16, 32, 112, 112]);
    bench("conv2 32->32 @56", NetSpec::new(vec![LayerSpec::Conv2 { cin: 32, cout: 32 }]), &[16, 32, 56, 56]);
    bench("conv2 32->32 @28", NetSpec::new(vec![LayerSpec::Conv2 { cin: 32, cout: 32 }]), &[16, 32, 28, 28]);
    bench("bn spatial @224", NetSpec::new(vec![LayerSpec::BatchNorm { n: 32, spatial: true }]), &[16, 32, 224, 224]);
    bench("elu @224x32", NetSpec::new(vec![LayerSpec::Elu]), &[16, 32, 224, 224]);
    bench("maxpool @224x32", NetSpec::new(vec![LayerSpec::MaxPool2]), &[16, 32, 224, 224]);
    bench("conv3 32->32 @14x14x10", NetSpec::new(vec![LayerSpec::Conv3 { cin: 32, cout: 32 }]), &[1, 32, 10, 14, 14]);
}

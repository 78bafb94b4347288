// scratch profiling of one chunk forward+backward at real size
use ccadepth_core::autograd::{Tape, TensorData};
use ccadepth_core::ddn::{DdnConfig, DdnModel};
use std::time::Instant;

fn main() {
    let cfg = DdnConfig::default();
    let model = DdnModel::<f32>::init(&cfg, 1).unwrap();
    let n = 16;
    let s = 16;
    let mk = |ch: usize| TensorData::from_values(
        &[n, ch, s, s],
        (0..n * ch * s * s).map(|i| ((i * 2654435761usize) % 1000) as f32 / 1000.0 - 0.5).collect(),
    );
    let main_data = mk(6);
    let pos_data = mk(2);
    let color_data = mk(2);
    let target_data = TensorData::from_values(&[n, 1], vec![1.5f32; n]);

    // warmup + timed runs
    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::<f32>::new();
        let ids = model.insert_leaves(&mut tape, true);
        let main = tape.leaf(main_data.clone(), false);
        let pos = tape.leaf(pos_data.clone(), false);
        let color = tape.leaf(color_data.clone(), false);
        let target = tape.leaf(target_data.clone(), false);
        let t_setup = t0.elapsed();

        let t1 = Instant::now();
        let out = model.forward(&mut tape, &ids, main, pos, color).unwrap();
        let t_fwd = t1.elapsed();

        let t2 = Instant::now();
        let err = tape.sub(out.blur, target).unwrap();
        let err = tape.abs(err);
        let sum = tape.sum_all(err);
        let loss = tape.scale(sum, 1.0 / 128.0);
        tape.backward(loss).unwrap();
        let t_bwd = t2.elapsed();

        if round > 0 {
            println!(
                "setup {:6.1}ms  forward {:6.1}ms  backward {:6.1}ms  (chunk of {n})",
                t_setup.as_secs_f64() * 1e3,
                t_fwd.as_secs_f64() * 1e3,
                t_bwd.as_secs_f64() * 1e3
            );
        }
    }
}

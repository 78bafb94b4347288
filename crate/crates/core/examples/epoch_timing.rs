// scratch: time the phases of one real training epoch
use ccadepth_core::config::ToolConfig;
use ccadepth_core::ddn::{self, DdnConfig, TrainOptions, TargetSource};
use ccadepth_core::render::read_dataset;
use std::time::Instant;

fn main() {
    let dir = std::path::Path::new("/tmp/ccafull/data");
    let train_ds = read_dataset(&dir.join("train.ccad")).unwrap();
    let test_ds = read_dataset(&dir.join("test.ccad")).unwrap();
    let mut tool = ToolConfig::default();
    tool.fc_coeff = 2.0;
    tool.coma_coeff = 0.3;
    tool.chroma_r = 1.003;
    tool.chroma_b = 0.997;
    let lens = tool.lens().unwrap();
    let mut cfg = DdnConfig::from_tool(&tool);
    cfg.epochs = 1;
    let opts = TrainOptions { workers: 2, target_source: TargetSource::IdealFromDistance, validate_params: false };
    let t = Instant::now();
    let r = ddn::train(&cfg, &train_ds, &test_ds, &lens, 7, &opts).unwrap();
    println!("1 epoch wall {:.1}s log_wall {:.1}s", t.elapsed().as_secs_f64(), r.log[0].wall_s);
}

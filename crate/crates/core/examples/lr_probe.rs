// scratch: convergence probe over lr settings
use ccadepth_core::config::ToolConfig;
use ccadepth_core::ddn::{self, DdnConfig, TargetSource, TrainOptions};
use ccadepth_core::render::read_dataset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
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
    cfg.epochs = epochs;
    cfg.lr = lr;
    let opts = TrainOptions { workers: 2, target_source: TargetSource::IdealFromDistance, validate_params: false };
    let r = ddn::train(&cfg, &train_ds, &test_ds, &lens, 7, &opts).unwrap();
    for e in &r.log {
        println!("lr={lr} epoch {} train_loss {:.4} test_mae {:.4} acc {:.3}", e.epoch, e.train_loss, e.test_mae_px, e.test_acc);
    }
}

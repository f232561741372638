use splatmap_core::checkpoint::load_checkpoint;
use splatmap_core::ingest::Dataset;
use splatmap_core::rasterizer::render;

fn main() {
    let dataset = Dataset::open(std::path::Path::new("/tmp/ds_acc_128_10")).unwrap();
    let scene = load_checkpoint(std::path::Path::new("/tmp/run_acc/checkpoint.bin")).unwrap();
    for t in [3usize, 4, 5] {
        let frame = dataset.read_frame(t).unwrap();
        let out = render(&scene, &frame);
        out.color.save_png(std::path::Path::new(&format!("/tmp/render_{t}.png"))).unwrap();
        frame.rgb.save_png(std::path::Path::new(&format!("/tmp/target_{t}.png"))).unwrap();
        // row-wise error profile
        let mut rows = vec![0.0f64; frame.height()];
        for v in 0..frame.height() {
            let mut e = 0.0;
            for u in 0..frame.width() {
                let a = out.color.at(u, v); let b = frame.rgb.at(u, v);
                e += (0..3).map(|k| (a[k]-b[k]).abs()).sum::<f64>() / 3.0;
            }
            rows[v] = e / frame.width() as f64;
        }
        let worst_row = rows.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        println!("frame {t}: worst row {} err {:.3}; row profile (every 8): {:?}", worst_row.0, worst_row.1,
            rows.iter().step_by(8).map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
    }
}

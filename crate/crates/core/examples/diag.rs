use splatmap_core::ingest::synth::synth_scene;
use splatmap_core::ingest::Dataset;
use splatmap_core::pipeline::{run_map, run_eval, MapOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let res: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(128);
    let frames: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let dir = std::path::PathBuf::from(format!("/tmp/ds_acc_{res}_{frames}"));
    if !dir.exists() { synth_scene(&dir, 7, frames, (res, res)).unwrap(); }
    let dataset = Dataset::open(&dir).unwrap();
    let mut opts = MapOptions::default();
    opts.config.iterations_per_frame = iters;
    opts.seed = 7;
    opts.out_dir = Some(std::path::PathBuf::from("/tmp/run_acc"));
    let t0 = std::time::Instant::now();
    let (_scene, report) = run_map(&dataset, &opts).unwrap();
    println!("mapping took {:.1}s", t0.elapsed().as_secs_f64());
    for f in &report.frames {
        println!("frame {}: psnr {:.2} ssim {:.3} mae {:.4} free {} sky {} road {}",
            f.frame, f.psnr, f.ssim, f.depth_mae, f.free_count, f.sky_count, f.plane_count);
    }
    // Post-run evaluation of all training views (what acceptance 3 measures)
    let (_s, eval) = run_eval(std::path::Path::new("/tmp/run_acc/checkpoint.bin"), &dataset).unwrap();
    println!("post-run: mean psnr {:.2} mean ssim {:.4}", eval.mean_psnr(), eval.mean_ssim());
    for f in &eval.frames {
        println!("  eval frame {}: psnr {:.2} ssim {:.3}", f.frame, f.psnr, f.ssim);
    }
}

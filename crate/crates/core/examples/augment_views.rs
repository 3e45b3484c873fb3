//! Draws a query/key pair for one sample and saves both RGB views as image
//! grids.

use signcon::augment::{make_views, AugmentConfig};
use signcon::config::RunConfig;
use signcon::corpus::generate_corpus;
use signcon::mpm::{write_ppm_grid, LatentCodec};
use signcon::rng::stream;

fn main() -> signcon::Result<()> {
    let cfg = RunConfig::toy();
    let mut spec = cfg.corpus.clone();
    spec.samples_per_class = 1;
    spec.eval_samples_per_class = 0;
    let samples = generate_corpus(&spec)?;
    let s = &samples[3];

    let aug = AugmentConfig {
        mpm_alpha: 1.0,
        ..cfg.augment.clone()
    };
    let codec = LatentCodec::new(s.clip.height(), s.clip.width(), 0);
    let views = make_views(s, &aug, &mut stream(7, &[]), Some(&codec))?;
    let dir = std::env::temp_dir().join("signcon_views");
    std::fs::create_dir_all(&dir).map_err(|e| signcon::Error::Io { path: dir.clone(), source: e })?;
    for (name, v) in [("query", &views.query), ("key", &views.key)] {
        println!("{name}: frames {:?}", v.indices);
        let frames = v.rgb.frames().mapv(|x| x as f64);
        write_ppm_grid(frames.view(), 4, &dir.join(format!("{name}.ppm")))?;
    }
    println!("grids in {}", dir.display());
    Ok(())
}

//! Motion-preserving masking on one toy clip: how many latent channels
//! survive as the threshold rises, and the preview grids at one setting.

use signcon::config::RunConfig;
use signcon::corpus::generate_corpus;
use signcon::mpm::{encode_latent, preview, run_mpm, temporal_std, LatentCodec, MaskRule};

fn main() -> signcon::Result<()> {
    let mut spec = RunConfig::toy().corpus;
    spec.samples_per_class = 1;
    spec.eval_samples_per_class = 0;
    let clip = &generate_corpus(&spec)?[0].clip;
    let codec = LatentCodec::new(clip.height(), clip.width(), 0);

    let sigma = temporal_std(&encode_latent(clip, &codec)?);
    println!("{} latent channels, max temporal std {:.4}", sigma.len(), sigma.fold(0.0f64, |a, &b| a.max(b)));
    for p in [0.0, 0.01, 0.02, 0.05, 0.1, 0.2] {
        let out = run_mpm(clip, &codec, &MaskRule::absolute(p))?;
        println!(
            "p = {p:<5} kept {:>5} channels, mask covers {:5.1}% of pixels",
            out.kept_channels,
            100.0 * out.mask.coverage()
        );
    }
    let dir = std::env::temp_dir().join("signcon_mpm");
    for path in preview(clip, &codec, &MaskRule::absolute(0.05), &dir, "sample0")? {
        println!("{}", path.display());
    }
    Ok(())
}

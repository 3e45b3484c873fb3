//! Runs both encoders and projection heads on a small batch and prints
//! shapes and parameter counts.

use signcon::augment::eval_view;
use signcon::autograd::Graph;
use signcon::config::RunConfig;
use signcon::contrastive::Modality;
use signcon::corpus::generate_corpus;
use signcon::encoders::{pose_batch, rgb_batch};
use signcon::rng::stream;

fn main() -> signcon::Result<()> {
    let cfg = RunConfig::toy();
    let mut spec = cfg.corpus.clone();
    spec.samples_per_class = 1;
    spec.eval_samples_per_class = 0;
    let samples = generate_corpus(&spec)?;
    let views: Vec<_> = samples.iter().take(4).map(|s| eval_view(s, cfg.augment.t_model)).collect();
    let nets = cfg.pretrain_config().model.build()?;

    let rgb = rgb_batch(&views.iter().map(|v| &v.rgb).collect::<Vec<_>>());
    let pose = pose_batch(&views.iter().map(|v| &v.pose).collect::<Vec<_>>());
    for (m, x) in [(Modality::Rgb, &rgb), (Modality::Pose, &pose)] {
        let enc = nets.init_encoder(m, &mut stream(0, &[m as u64]));
        let head = nets.head(m).init(&mut stream(1, &[m as u64]));
        let mut g = Graph::no_grad();
        let (pe, ph) = (enc.bind(&mut g, false), head.bind(&mut g, false));
        let feat = nets.encode(m, &mut g, &pe, x)?;
        let f = nets.head(m).forward(&mut g, &ph, feat);
        println!(
            "{:>4}: input {:?} -> g {:?} -> f {:?}; {} encoder + {} head parameters",
            m.name(),
            x.shape(),
            g.value(feat).shape(),
            g.value(f).shape(),
            enc.num_scalars(),
            head.num_scalars()
        );
    }
    for (k, v) in nets.descriptor().iter().take(6) {
        println!("  {k} = {v}");
    }
    Ok(())
}

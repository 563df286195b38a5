use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use voxseg_core::volume::io::save_case;
use voxseg_core::volume::phantom::{make_phantom, PhantomSpec};

use crate::manifest;

#[derive(Args, Serialize, Debug)]
pub struct PhantomArgs {
    /// Number of cases to generate.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    /// Base seed; case i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (one subdirectory per case).
    #[arg(long)]
    pub out: PathBuf,
    /// Cubic volume side length.
    #[arg(long, default_value_t = 64)]
    pub shape: usize,
    #[arg(long, default_value_t = 2)]
    pub n_tumors: usize,
    /// Nested sphere radii wt,tc,et in voxels.
    #[arg(long, default_value = "9,5,3")]
    pub radii: String,
}

pub fn run(args: &PhantomArgs) -> anyhow::Result<()> {
    let radii: Vec<f32> = super::parse_list(&args.radii)?;
    if radii.len() != 3 {
        anyhow::bail!("--radii needs exactly three values, got {:?}", radii);
    }
    for i in 0..args.n {
        let spec = PhantomSpec {
            shape: [args.shape; 3],
            n_tumors: args.n_tumors,
            radii: [radii[0], radii[1], radii[2]],
            seed: args.seed + i as u64,
            ..PhantomSpec::default()
        };
        let mut case = make_phantom(&spec).context("generating phantom")?;
        case.id = format!("phantom_{i:03}");
        let dir = args.out.join(&case.id);
        save_case(&case, &dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    let argv = vec![
        "phantom".into(),
        "--n".into(),
        args.n.to_string(),
        "--seed".into(),
        args.seed.to_string(),
        "--out".into(),
        args.out.display().to_string(),
        "--shape".into(),
        args.shape.to_string(),
        "--n-tumors".into(),
        args.n_tumors.to_string(),
        "--radii".into(),
        args.radii.clone(),
    ];
    manifest::write(&args.out, "phantom", args, argv)
}

use std::path::PathBuf;

use clap::Args;
use vitalflow::config::FlatConfig;
use vitalflow::record::split_subjects;

use crate::dataset::{create_dir, load_dir, write_manifest, write_text};
use crate::failure::{fail, CmdResult, WithCode, EXIT_SCHEMA, EXIT_USAGE};

pub const MANIFESTS: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory of records.
    #[arg(long)]
    input: PathBuf,
    /// Where the manifests go; defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train:val:test proportions.
    #[arg(long, default_value = "6:1:1")]
    ratio: String,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_ratio(s: &str) -> CmdResult<(u32, u32, u32)> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Result<Vec<u32>, _> = parts.iter().map(|p| p.trim().parse::<u32>()).collect();
    match nums.as_deref() {
        Ok([a, b, c]) => Ok((*a, *b, *c)),
        _ => fail(EXIT_USAGE, format!("ratio must look like 6:1:1, got '{s}'")),
    }
}

pub fn run(args: SplitArgs) -> CmdResult {
    let ratio = parse_ratio(&args.ratio)?;
    let records = load_dir(&args.input)?;
    let ids: Vec<String> = records.keys().cloned().collect();
    let split = split_subjects(&ids, ratio, args.seed).code(EXIT_SCHEMA)?;
    let out = args.out.unwrap_or(args.input);
    create_dir(&out)?;
    for (name, ids) in MANIFESTS.iter().zip([&split.train, &split.val, &split.test]) {
        write_manifest(&out.join(name), ids)?;
        println!("{name}: {} subject(s): {}", ids.len(), ids.join(", "));
    }
    let mut echo = FlatConfig::new();
    echo.set("split.ratio", &args.ratio);
    echo.set("split.seed", args.seed);
    // the output directory usually already holds the preprocessing echo
    write_text(&out.join("split.txt"), &echo.to_string())
}

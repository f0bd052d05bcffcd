//! Run configuration: profile expansion and TOML overrides.

use mambo::cli::{Profile, RunConfig};

fn main() -> mambo::Result<()> {
    let paper = RunConfig::expand(Profile::Paper);
    println!("paper: s={} N={} T={} sampler={}", paper.geometry.s, paper.geometry.n, paper.schedule.steps, paper.sampler);

    let custom = RunConfig::parse(
        r#"
        seed = 12
        sampler = "ddim:50"
        [geometry]
        overlap = 8
        [anomaly]
        lambda = 500
        "#,
    )?;
    print!("{}", custom.to_toml());

    match RunConfig::parse("[geometry]\noverlap = 64") {
        Err(e) => println!("rejected: {e} (exit code {})", e.category().exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}

use clap::Parser;

fn main() -> anyhow::Result<()> {
    // parse once up front so --help and usage errors get clap's own output
    odssd_cli::Cli::parse();
    let args: Vec<String> = std::env::args().skip(1).collect();
    odssd_cli::run(&args)
}

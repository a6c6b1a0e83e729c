use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = bachkit::cli::Cli::parse();
    bachkit::cli::run(cli, &mut std::io::stdout().lock())
}

use clap::Parser;

fn main() {
    let args = fracou::cli::Args::parse();
    std::process::exit(fracou::cli::run(&args));
}

fn main() {
    std::process::exit(latent_threshold::cli::run(std::env::args_os()));
}

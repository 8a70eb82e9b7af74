fn main() {
    std::process::exit(vitc_unet::cli::main_with_args(std::env::args().collect()));
}

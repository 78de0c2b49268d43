fn main() {
    std::process::exit(moe_uq::cli::run(std::env::args_os()));
}

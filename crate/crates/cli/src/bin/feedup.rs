fn main() {
    gums_cli::init_logging();
    std::process::exit(gums_cli::feedup::run(std::env::args_os()).emit());
}

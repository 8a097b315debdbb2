fn main() {
    std::process::exit(distreg::harness::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(mfhom_core::harness::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(mfsb::cli_main());
}

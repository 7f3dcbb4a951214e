fn main() {
    std::process::exit(gapcast::cli_main());
}

fn main() {
    std::process::exit(m2rnn_cli::run(std::env::args_os()));
}

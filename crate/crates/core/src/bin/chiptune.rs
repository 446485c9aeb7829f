// SPDX-License-Identifier: Apache-2.0

fn main() {
    std::process::exit(chiptune::cli::main_with_args(std::env::args_os()));
}

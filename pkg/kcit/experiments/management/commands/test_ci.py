from ..base import IndependenceTestCommand


class Command(IndependenceTestCommand):
    help = (
        "Kernel conditional independence test of X and Y given Z on a CSV. "
        "Without --z the unconditional test is run."
    )

    command_name = "test-ci"
    conditional = True

# Operator command line

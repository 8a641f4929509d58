#!/usr/bin/env python3
"""Allow user to run main speede ctl script"""

# Execute with:
# $ python -m speede_ctl

import speede_ctl.speede_ctl as speede_ctl

if __name__ == "__main__":
    speede_ctl.main()

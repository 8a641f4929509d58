from setuptools import setup

# this grabs the requirements from requirements.txt
# REQUIREMENTS = [i.strip() for i in open("requirements.txt").readlines()]
if __name__ == '__main__':
    setup()
